//! Common eigenvector assignment: find one unit vector and per-subsystem
//! feedbacks making that vector an eigenvector of every closed loop at
//! prescribed eigenvalues.
//!
//! For subsystems `(A_i, B_i)` (all sharing the state dimension `n`) and
//! target eigenvalues `lambda_i`, a common eigenvector `v` and feedbacks
//! `F_i` with `(A_i + B_i F_i) v = lambda_i v` exist exactly when the stacked
//! matrix
//!
//! ```text
//! Q(Lambda) = [ lambda_1 I - A_1   -b_1              ]
//!             [ lambda_2 I - A_2         -b_2        ]
//!             [ ...                           ...    ]
//!             [ lambda_N I - A_N              -b_N   ]
//! ```
//!
//! has a nontrivial kernel, where `B_i = b_i r_i` factors through an
//! orthonormal image basis `b_i`. A kernel vector `w = (v, u_1, ..., u_N)`
//! always has `v != 0`, and the feedbacks are recovered as Moore-Penrose
//! products `F_i = r_i^+ u_i v^+`. The kernel is guaranteed nontrivial —
//! for every eigenvalue choice — whenever the structural index
//! `p = n + sum_i rank(B_i) - N n` is positive, because `Q` is `Nn` rows by
//! `n + sum_i rank(B_i)` columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{self, TolerancePolicy};

/// Entries of a unit vector smaller than this are ignored when picking the
/// leading entry that fixes the sign convention.
const SIGN_EPS: f64 = 1e-12;

/// Interval from which probe eigenvalues are drawn when the scheduled ones
/// leave the kernel empty. Strictly inside the unit interval so probed
/// assignments stay stable.
const PROBE_RANGE: f64 = 0.95;

/// Errors from eigenvector assignment.
#[derive(Debug, Error)]
pub enum CeaError {
    #[error("invalid input: {detail}")]
    InvalidInput { detail: String },
    #[error("eigenvalue for subsystem {subsystem} has magnitude {value} but must be strictly inside the unit interval")]
    EigenvalueMagnitude { subsystem: usize, value: f64 },
    #[error("kernel of the assignment matrix is empty")]
    KernelEmpty,
    #[error("kernel empty after {probes} probes")]
    KernelEmptyAllProbes { probes: u32 },
    #[error("eigenvector residual {residual:e} for subsystem {subsystem} exceeds tolerance")]
    NumericalResidual { subsystem: usize, residual: f64 },
    #[error("kernel vector has numerically zero eigenvector component")]
    DegenerateKernel,
}

/// A validated instance of the assignment problem: reduced subsystem
/// matrices sharing one dimension and one target eigenvalue per subsystem.
///
/// Unlike full systems, the `B_i` here may be rank-deficient — the dimension
/// reduction erodes input ranks as the design progresses — so no rank
/// validation happens here.
#[derive(Debug, Clone)]
pub struct CeaInput {
    a_list: Vec<DMatrix<f64>>,
    b_list: Vec<DMatrix<f64>>,
    lambda: Vec<f64>,
}

impl CeaInput {
    /// Validates dimensions and eigenvalue magnitudes.
    pub fn new(
        a_list: Vec<DMatrix<f64>>,
        b_list: Vec<DMatrix<f64>>,
        lambda: Vec<f64>,
    ) -> Result<Self, CeaError> {
        if a_list.is_empty() {
            return Err(CeaError::InvalidInput {
                detail: "at least one subsystem is required".into(),
            });
        }
        if a_list.len() != b_list.len() || a_list.len() != lambda.len() {
            return Err(CeaError::InvalidInput {
                detail: format!(
                    "got {} state matrices, {} input matrices, {} eigenvalues",
                    a_list.len(),
                    b_list.len(),
                    lambda.len()
                ),
            });
        }
        let n = a_list[0].nrows();
        if n == 0 {
            return Err(CeaError::InvalidInput {
                detail: "state dimension must be at least 1".into(),
            });
        }
        for (i, (a, b)) in a_list.iter().zip(&b_list).enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(CeaError::InvalidInput {
                    detail: format!(
                        "state matrix {} is {}x{}, expected {n}x{n}",
                        i + 1,
                        a.nrows(),
                        a.ncols()
                    ),
                });
            }
            if b.nrows() != n {
                return Err(CeaError::InvalidInput {
                    detail: format!("input matrix {} has {} rows, expected {n}", i + 1, b.nrows()),
                });
            }
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(l.abs() < 1.0) {
                return Err(CeaError::EigenvalueMagnitude {
                    subsystem: i + 1,
                    value: l,
                });
            }
        }
        Ok(CeaInput {
            a_list,
            b_list,
            lambda,
        })
    }

    /// Shared state dimension of the reduced subsystems.
    pub fn n_ell(&self) -> usize {
        self.a_list[0].nrows()
    }

    /// Number of subsystems.
    pub fn num_subsystems(&self) -> usize {
        self.a_list.len()
    }

    /// Target eigenvalues, one per subsystem.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// State matrices.
    pub fn a_list(&self) -> &[DMatrix<f64>] {
        &self.a_list
    }

    /// Input matrices.
    pub fn b_list(&self) -> &[DMatrix<f64>] {
        &self.b_list
    }

    /// The same instance with different target eigenvalues.
    pub fn with_lambda(&self, lambda: Vec<f64>) -> Result<Self, CeaError> {
        CeaInput::new(self.a_list.clone(), self.b_list.clone(), lambda)
    }
}

/// Result of a successful assignment.
#[derive(Debug, Clone)]
pub struct CeaOutput {
    /// Eigenvalues actually assigned (differs from the schedule when the
    /// probe fallback fired).
    pub lambda: Vec<f64>,
    /// Whether the eigenvalues came from random probing.
    pub probed: bool,
    /// Common unit eigenvector, sign-normalized so its first entry larger
    /// than `1e-12` in magnitude is positive.
    pub v1: DVector<f64>,
    /// Feedbacks `F_i` (`m_i x n`) with `(A_i + B_i F_i) v1 = lambda_i v1`.
    pub f_list: Vec<DMatrix<f64>>,
    /// The raw kernel vector `(v, u_1, ..., u_N)` the solution came from.
    pub w: DVector<f64>,
    /// Ranks of the input matrices, as used in the factorization.
    pub m_ranks: Vec<usize>,
    /// Numerical dimension of the kernel of the assignment matrix.
    pub kernel_dim: usize,
    /// Per-subsystem residuals `|(A_i + B_i F_i) v1 - lambda_i v1|`.
    pub residuals: Vec<f64>,
}

/// Orthonormal-image factorization of one input matrix: `B = b r` with `b`
/// having orthonormal columns spanning the image of `B` and `r = b' B` of
/// full row rank.
#[derive(Debug, Clone)]
pub struct InputFactors {
    /// Orthonormal image basis (`n x rank`), each column sign-normalized so
    /// its largest-magnitude entry is positive.
    pub b: DMatrix<f64>,
    /// Coefficient factor (`rank x m`), full row rank.
    pub r: DMatrix<f64>,
    /// Rank of the input matrix.
    pub rank: usize,
}

/// Factors `B = b r` through an orthonormal basis of the image of `B`.
///
/// Signs are pinned (largest-magnitude entry of each basis column positive)
/// so the factorization — and everything downstream of it — is a
/// deterministic function of `B`.
pub fn factor_input_matrix(b_mat: &DMatrix<f64>, pol: &TolerancePolicy) -> InputFactors {
    let image = linalg::image_basis(b_mat, pol);
    let mut basis = image.basis().clone();
    for j in 0..basis.ncols() {
        let mut lead = 0;
        let mut best = 0.0;
        for i in 0..basis.nrows() {
            let mag = basis[(i, j)].abs();
            if mag > best {
                best = mag;
                lead = i;
            }
        }
        if basis[(lead, j)] < 0.0 {
            basis.column_mut(j).neg_mut();
        }
    }
    let r = basis.transpose() * b_mat;
    let rank = basis.ncols();
    InputFactors { b: basis, r, rank }
}

/// Structural index `p = n_ell + sum(m_ranks) - N * n_ell` for `N`
/// subsystems of dimension `n_ell` with the given input ranks. The kernel of
/// the assignment matrix has dimension at least `max(p, 0)`; positive `p`
/// guarantees a common eigenvector for every eigenvalue choice.
pub fn compute_p(n_ell: usize, m_ranks: &[usize]) -> i64 {
    let n_subsystems = m_ranks.len() as i64;
    let total: i64 = m_ranks.iter().map(|&m| m as i64).sum();
    n_ell as i64 + total - n_subsystems * n_ell as i64
}

/// Assembles the stacked assignment matrix `Q(Lambda)` from the state
/// matrices, the orthonormal image factors `b_i`, and the eigenvalues. The
/// result is `N n x (n + sum_i rank_i)`.
pub fn build_q(
    a_list: &[DMatrix<f64>],
    b_factors: &[DMatrix<f64>],
    lambda: &[f64],
) -> DMatrix<f64> {
    let n_subsystems = a_list.len();
    let n = a_list[0].nrows();
    let total_rank: usize = b_factors.iter().map(|b| b.ncols()).sum();
    let mut q = DMatrix::zeros(n_subsystems * n, n + total_rank);
    let mut col_offset = n;
    for (i, (a, b)) in a_list.iter().zip(b_factors).enumerate() {
        let row = i * n;
        let mut block = -a.clone();
        for d in 0..n {
            block[(d, d)] += lambda[i];
        }
        q.view_mut((row, 0), (n, n)).copy_from(&block);
        let rank = b.ncols();
        q.view_mut((row, col_offset), (n, rank)).copy_from(&(-b));
        col_offset += rank;
    }
    q
}

/// Recovers the per-subsystem feedbacks from a kernel vector's components:
/// `F_i = r_i^+ u_i v^+`, with Moore-Penrose pseudo-inverses on both sides.
/// Invariant under rescaling of the kernel vector.
pub(crate) fn feedbacks_from_kernel(
    factors: &[InputFactors],
    v: &DVector<f64>,
    u_parts: &[DVector<f64>],
    pol: &TolerancePolicy,
) -> Result<Vec<DMatrix<f64>>, CeaError> {
    let v_norm_sq = v.norm_squared();
    if v_norm_sq == 0.0 {
        return Err(CeaError::DegenerateKernel);
    }
    let n = v.len();
    let v_dagger = v.transpose() / v_norm_sq;
    let mut f_list = Vec::with_capacity(factors.len());
    for (fac, u) in factors.iter().zip(u_parts) {
        let m_cols = fac.r.ncols();
        if fac.rank == 0 {
            f_list.push(DMatrix::zeros(m_cols, n));
            continue;
        }
        let r_dagger = linalg::pseudo_inverse(&fac.r, pol.rank_rel_tol);
        f_list.push(r_dagger * u * &v_dagger);
    }
    Ok(f_list)
}

/// Smallest eigenvector-component norm a kernel direction may have before
/// it is rejected as degenerate: the feedback recovery divides by this
/// norm, so anything near roundoff scale amplifies the kernel's numerical
/// error past any usable residual.
const DEGENERATE_V_TOL: f64 = 1e-12;

/// Solves the assignment problem for the scheduled eigenvalues.
///
/// `kernel_index` selects which kernel direction becomes the eigenvector.
/// The candidate directions (right singular recombinations of the kernel
/// basis's eigenvector block, which sorts them by decreasing eigenvector
/// content) are ranked by structural preference: directions lying in fewer
/// input images come first, because a direction inside every image forces
/// the structural index down by the trace law, while one outside some
/// image preserves it. Within equal membership counts, larger eigenvector
/// components (the quantity the feedback recovery divides by) win. Index 0
/// — the default — is thus the choice that keeps later iterations both
/// solvable and well conditioned; indices past the ranked family clamp to
/// its last member.
pub fn cea(
    input: &CeaInput,
    pol: &TolerancePolicy,
    kernel_index: usize,
) -> Result<CeaOutput, CeaError> {
    let n = input.n_ell();
    let factors: Vec<InputFactors> = input
        .b_list
        .iter()
        .map(|b| factor_input_matrix(b, pol))
        .collect();
    let b_bases: Vec<DMatrix<f64>> = factors.iter().map(|f| f.b.clone()).collect();
    let q = build_q(&input.a_list, &b_bases, &input.lambda);
    let kernel = linalg::null_space(&q, pol);
    let kernel_dim = kernel.dim();
    if kernel_dim == 0 {
        return Err(CeaError::KernelEmpty);
    }

    // Candidate kernel vectors, by descending eigenvector-component norm:
    // the right singular vectors of the kernel basis's v-block give the
    // coefficient directions, and the kernel basis is orthonormal, so the
    // recombinations stay unit vectors.
    let candidates: Vec<DVector<f64>> = if kernel_dim == 1 {
        vec![kernel.basis().column(0).into_owned()]
    } else {
        let v_block = kernel.basis().rows(0, n).into_owned();
        let v_t = linalg::thin_svd(&v_block).v_t;
        (0..v_t.nrows())
            .map(|j| kernel.basis() * v_t.row(j).transpose())
            .collect()
    };

    // Rank candidates by (input-image membership count, conditioning
    // order) and drop the degenerate ones.
    let mut ranked: Vec<(usize, usize)> = Vec::with_capacity(candidates.len());
    for (j, w_j) in candidates.iter().enumerate() {
        let v_raw = w_j.rows(0, n);
        let v_norm = v_raw.norm();
        if v_norm < DEGENERATE_V_TOL {
            continue;
        }
        let v_unit = v_raw / v_norm;
        let memberships = factors
            .iter()
            .filter(|fac| {
                fac.rank > 0 && (&v_unit - &fac.b * (fac.b.transpose() * &v_unit)).norm() <= pol.angle_tol
            })
            .count();
        ranked.push((memberships, j));
    }
    if ranked.is_empty() {
        return Err(CeaError::DegenerateKernel);
    }
    ranked.sort_unstable();
    let (_, chosen) = ranked[kernel_index.min(ranked.len() - 1)];
    let mut w = candidates[chosen].clone();

    // Fix the overall sign of the kernel vector from its eigenvector part,
    // so v1's first significant entry is positive.
    let v_raw = w.rows(0, n).into_owned();
    let v_norm = v_raw.norm();
    debug_assert!(v_norm >= DEGENERATE_V_TOL);
    let v1_unsigned = &v_raw / v_norm;
    let flip = v1_unsigned
        .iter()
        .find(|e| e.abs() > SIGN_EPS)
        .is_some_and(|&e| e < 0.0);
    if flip {
        w.neg_mut();
    }

    let v = w.rows(0, n).into_owned();
    let v1 = &v / v_norm;
    let mut u_parts = Vec::with_capacity(factors.len());
    let mut offset = n;
    for fac in &factors {
        u_parts.push(w.rows(offset, fac.rank).into_owned());
        offset += fac.rank;
    }
    let f_list = feedbacks_from_kernel(&factors, &v, &u_parts, pol)?;

    let mut residuals = Vec::with_capacity(factors.len());
    for (i, ((a, b), f)) in input
        .a_list
        .iter()
        .zip(&input.b_list)
        .zip(&f_list)
        .enumerate()
    {
        let achieved = a * &v1 + b * (f * &v1);
        let residual = (&achieved - input.lambda[i] * &v1).norm();
        if !(residual <= pol.residual_tol) {
            return Err(CeaError::NumericalResidual {
                subsystem: i + 1,
                residual,
            });
        }
        residuals.push(residual);
    }

    Ok(CeaOutput {
        lambda: input.lambda.clone(),
        probed: false,
        v1,
        f_list,
        w,
        m_ranks: factors.iter().map(|f| f.rank).collect(),
        kernel_dim,
        residuals,
    })
}

/// Whether solving at a different eigenvalue choice could plausibly
/// succeed: an empty kernel, a kernel with no eigenvector content, or a
/// residual blowup are all artifacts of the specific `Lambda`, while input
/// validation failures are not.
fn is_lambda_specific(err: &CeaError) -> bool {
    matches!(
        err,
        CeaError::KernelEmpty | CeaError::DegenerateKernel | CeaError::NumericalResidual { .. }
    )
}

/// Like [`cea`], but falls back to randomly probed eigenvalues when the
/// scheduled ones fail.
///
/// Probes draw each eigenvalue uniformly from `(-0.95, 0.95)` using a
/// seed-determined stream, so the fallback is reproducible. Probing
/// retries every failure tied to the specific eigenvalue choice — an empty
/// kernel, and also the measure-zero degenerate cases where the kernel
/// exists but carries no usable eigenvector at exactly the scheduled
/// values. Input validation errors propagate immediately.
pub fn cea_with_probe(
    input: &CeaInput,
    pol: &TolerancePolicy,
    kernel_index: usize,
    probe_budget: u32,
    seed: u64,
) -> Result<CeaOutput, CeaError> {
    let mut last_err = match cea(input, pol, kernel_index) {
        Ok(out) => return Ok(out),
        Err(err) if is_lambda_specific(&err) => err,
        Err(other) => return Err(other),
    };
    let mut all_kernel_empty = matches!(last_err, CeaError::KernelEmpty);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probe_budget {
        let lambda: Vec<f64> = (0..input.num_subsystems())
            .map(|_| rng.random_range(-PROBE_RANGE..PROBE_RANGE))
            .collect();
        let probe_input = input.with_lambda(lambda)?;
        match cea(&probe_input, pol, kernel_index) {
            Ok(mut out) => {
                out.probed = true;
                return Ok(out);
            }
            Err(err) if is_lambda_specific(&err) => {
                all_kernel_empty = all_kernel_empty && matches!(err, CeaError::KernelEmpty);
                last_err = err;
            }
            Err(other) => return Err(other),
        }
    }
    // "Kernel empty after probes" is only an honest summary when probing
    // happened and every attempt actually found an empty kernel; a run
    // that died on degenerate kernels or residual blowups (or that never
    // probed) reports its last failure as-is.
    if all_kernel_empty && probe_budget > 0 {
        Err(CeaError::KernelEmptyAllProbes {
            probes: probe_budget,
        })
    } else {
        Err(last_err)
    }
}
