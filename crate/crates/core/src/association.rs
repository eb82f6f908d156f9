//! Expectation step of EM data association: exact weight sums over the
//! association space and the per-detection factorized marginals.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::observation::LOG_DENSITY_FLOOR;

/// Largest number of detections or landmarks accepted by [`weights_exact`].
pub const EXACT_SIZE_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("exact enumeration limited to {limit}x{limit}, got {rows}x{cols}")]
    SizeGuard { rows: usize, cols: usize, limit: usize },
    #[error("one-to-one association of {rows} detections into {cols} landmarks is infeasible")]
    Infeasible { rows: usize, cols: usize },
    #[error("likelihood matrix must have at least one row and one column")]
    Empty,
}

/// Log-likelihoods of detection `k` (row) against landmark `j` (column).
/// Entries below [`LOG_DENSITY_FLOOR`] (including −∞ and NaN) are raised to
/// the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    entries: DMatrix<f64>,
}

impl LikelihoodMatrix {
    pub fn new(mut entries: DMatrix<f64>) -> Result<Self, AssociationError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(AssociationError::Empty);
        }
        entries.apply(|x| {
            if !(*x >= LOG_DENSITY_FLOOR) {
                *x = LOG_DENSITY_FLOOR;
            }
        });
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssociationError> {
        let k = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        Self::new(DMatrix::from_fn(k, m, |i, j| rows[i][j]))
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn detections(&self) -> usize {
        self.entries.nrows()
    }

    pub fn landmarks(&self) -> usize {
        self.entries.ncols()
    }

    /// Appends a constant column.
    pub fn with_constant_column(&self, value: f64) -> LikelihoodMatrix {
        let (k, m) = self.entries.shape();
        let mut out = self.entries.clone().insert_column(m, value.max(LOG_DENSITY_FLOOR));
        if value.is_nan() {
            out.column_mut(m).fill(LOG_DENSITY_FLOOR);
        }
        debug_assert_eq!(out.nrows(), k);
        LikelihoodMatrix { entries: out }
    }
}

/// Row-stochastic association weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationWeights {
    pub w: DMatrix<f64>,
    /// Rows whose entries all sat at the floor and were set uniform.
    pub degenerate_rows: Vec<usize>,
}

impl AssociationWeights {
    pub fn detections(&self) -> usize {
        self.w.nrows()
    }

    pub fn columns(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_rows.is_empty()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.w
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Association space for [`weights_exact`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationConstraint {
    /// Every detection picks any landmark independently.
    Unconstrained,
    /// Distinct detections pick distinct landmarks.
    OneToOne,
    /// Like `OneToOne`, except the last column may be shared by any number
    /// of detections (a "new landmark" column).
    OneToOneSharedLast,
}

/// `w_kj = Σ_{D ∈ 𝔻(k,j)} Π_i p_i / Σ_{D ∈ 𝔻} Π_i p_i` by brute-force
/// enumeration, in log-sum-exp form.
pub fn weights_exact(
    l: &LikelihoodMatrix,
    constraint: AssociationConstraint,
) -> Result<AssociationWeights, AssociationError> {
    let (k, m) = l.entries.shape();
    if k > EXACT_SIZE_LIMIT || m > EXACT_SIZE_LIMIT + usize::from(constraint == AssociationConstraint::OneToOneSharedLast) {
        return Err(AssociationError::SizeGuard {
            rows: k,
            cols: m,
            limit: EXACT_SIZE_LIMIT,
        });
    }
    let exclusive_cols = match constraint {
        AssociationConstraint::Unconstrained => 0,
        AssociationConstraint::OneToOne => m,
        AssociationConstraint::OneToOneSharedLast => m - 1,
    };
    if constraint == AssociationConstraint::OneToOne && k > m {
        return Err(AssociationError::Infeasible { rows: k, cols: m });
    }
    let exclusive = |j: usize| j < exclusive_cols;

    let mut acc = ExactAccumulator {
        max: f64::NEG_INFINITY,
        total: 0.0,
        numer: DMatrix::zeros(k, m),
    };
    let mut current = vec![0usize; k];
    let mut used = vec![false; m];
    enumerate(l, 0, 0.0, &mut current, &mut used, &exclusive, &mut acc);
    if acc.total == 0.0 {
        return Err(AssociationError::Infeasible { rows: k, cols: m });
    }
    Ok(AssociationWeights {
        w: acc.numer / acc.total,
        degenerate_rows: Vec::new(),
    })
}

/// Streaming log-sum-exp over mappings, rescaled whenever the running
/// maximum score grows.
struct ExactAccumulator {
    max: f64,
    total: f64,
    numer: DMatrix<f64>,
}

impl ExactAccumulator {
    fn push(&mut self, score: f64, mapping: &[usize]) {
        if score > self.max {
            let scale = (self.max - score).exp();
            self.total *= scale;
            self.numer *= scale;
            self.max = score;
        }
        let p = (score - self.max).exp();
        self.total += p;
        for (row, &col) in mapping.iter().enumerate() {
            self.numer[(row, col)] += p;
        }
    }
}

fn enumerate(
    l: &LikelihoodMatrix,
    row: usize,
    score: f64,
    current: &mut [usize],
    used: &mut [bool],
    exclusive: &dyn Fn(usize) -> bool,
    acc: &mut ExactAccumulator,
) {
    if row == current.len() {
        acc.push(score, current);
        return;
    }
    for j in 0..l.entries.ncols() {
        let excl = exclusive(j);
        if excl && used[j] {
            continue;
        }
        current[row] = j;
        used[j] = excl;
        enumerate(l, row + 1, score + l.entries[(row, j)], current, used, exclusive, acc);
        used[j] = false;
    }
}

/// Per-detection softmax over landmarks. Equal to the unconstrained exact
/// weights because the joint likelihood factorizes over detections.
pub fn weights_factorized(l: &LikelihoodMatrix) -> AssociationWeights {
    let (k, m) = l.entries.shape();
    let mut w = DMatrix::<f64>::zeros(k, m);
    let mut degenerate_rows = Vec::new();
    for (i, row) in l.entries.row_iter().enumerate() {
        if row.iter().all(|x| *x <= LOG_DENSITY_FLOOR) {
            w.row_mut(i).fill(1.0 / m as f64);
            degenerate_rows.push(i);
            continue;
        }
        let max = row.max();
        let mut sum = 0.0;
        for j in 0..m {
            let p = (row[j] - max).exp();
            w[(i, j)] = p;
            sum += p;
        }
        w.row_mut(i).unscale_mut(sum);
    }
    AssociationWeights { w, degenerate_rows }
}

/// Factorized weights over the landmarks plus a trailing "new landmark"
/// column with constant log-likelihood.
pub fn weights_with_null(l: &LikelihoodMatrix, new_landmark_log_likelihood: f64) -> AssociationWeights {
    weights_factorized(&l.with_constant_column(new_landmark_log_likelihood))
}
