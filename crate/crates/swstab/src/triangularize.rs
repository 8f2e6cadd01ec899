//! The iterative design loop: assign a common eigenvector, peel it off,
//! repeat in one fewer dimension until every closed loop is upper
//! triangular in a single orthogonal frame.
//!
//! Iteration `l` works in dimension `n_l = n - l + 1`. The eigenvector
//! assignment ([`crate::cea`]) produces a common unit eigenvector `v1` and
//! feedbacks for the reduced subsystems; the reduction then restricts the
//! closed loops to the orthogonal complement of `v1` and the loop recurses.
//! Feedbacks pull back to full-size gains through the accumulated
//! complement embedding, and the eigenvectors themselves assemble into the
//! orthogonal transformation that exhibits the triangular structure. With
//! every assigned eigenvalue strictly inside the unit interval, the
//! resulting closed loops are stable under arbitrary switching, certified
//! separately by [`crate::verify`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cea::{self, CeaError, CeaInput};
use crate::linalg::{self, TolerancePolicy};
use crate::model::{FeedbackDesign, IterationRecord, SubspaceDiagnostics, SwitchedSystem};
use crate::seeds;
use crate::structural;

/// Eigenvalue schedule for the design iterations.
///
/// `Constant(c)` assigns `c` to every subsystem at every iteration (the
/// default, with `c = 0.5`). `PerIteration` assigns one value per iteration,
/// shared across subsystems; its length must equal the state dimension.
/// Serialized as either a bare number or an array of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSchedule {
    Constant(f64),
    PerIteration(Vec<f64>),
}

impl LambdaSchedule {
    /// The eigenvalues for iteration `ell` (1-based), one per subsystem.
    fn eigenvalues_for(&self, ell: usize, n_subsystems: usize) -> Vec<f64> {
        let value = match self {
            LambdaSchedule::Constant(c) => *c,
            LambdaSchedule::PerIteration(v) => v[ell - 1],
        };
        vec![value; n_subsystems]
    }

    fn values(&self) -> Vec<f64> {
        match self {
            LambdaSchedule::Constant(c) => vec![*c],
            LambdaSchedule::PerIteration(v) => v.clone(),
        }
    }
}

/// Configuration for the design loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    /// Eigenvalue schedule; defaults to the constant `0.5`.
    pub lambda: LambdaSchedule,
    /// Which kernel direction becomes the eigenvector (0 = the direction
    /// preferred by [`cea::cea`]'s structural ranking). Clamped to the
    /// available kernel at each iteration.
    pub kernel_index: usize,
    /// How many random eigenvalue probes to try when the scheduled values
    /// leave the kernel empty. Zero disables probing.
    pub probe_budget: u32,
    /// Base seed for the probe streams (one independent stream per
    /// iteration).
    pub seed: u64,
    /// Record assignable-subspace diagnostics in each iteration record.
    pub diagnostic_subspaces: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            lambda: LambdaSchedule::Constant(0.5),
            kernel_index: 0,
            probe_budget: 25,
            seed: 0,
            diagnostic_subspaces: false,
        }
    }
}

/// A successful design together with its per-iteration trace.
#[derive(Debug, Clone)]
pub struct DesignResult {
    /// The gains, transformation, and assigned eigenvalues.
    pub design: FeedbackDesign,
    /// One record per iteration, in order.
    pub records: Vec<IterationRecord>,
}

/// Errors from the design loop.
#[derive(Debug, Error)]
pub enum DesignError {
    /// The eigenvector assignment failed at some iteration. Records for the
    /// completed iterations are attached so the failure point is fully
    /// diagnosable.
    #[error("{}", failed_message(.iteration, .source))]
    Failed {
        iteration: usize,
        source: CeaError,
        records: Vec<IterationRecord>,
    },
    #[error("invalid design configuration: {detail}")]
    InvalidConfig { detail: String },
    #[error("eigenvector precondition violated for subsystem {subsystem}: residual {residual:e}")]
    EigenvectorPrecondition { subsystem: usize, residual: f64 },
    #[error("dimension mismatch in reduction: {detail}")]
    Shape { detail: String },
}

fn failed_message(iteration: &usize, source: &CeaError) -> String {
    match source {
        CeaError::KernelEmptyAllProbes { probes } => {
            format!("kernel empty at iteration {iteration} after {probes} probes")
        }
        CeaError::KernelEmpty => {
            format!("kernel empty at iteration {iteration} (no probes attempted)")
        }
        other => format!("design failed at iteration {iteration}: {other}"),
    }
}

/// Restricts the closed loops to the orthogonal complement of a freshly
/// assigned common eigenvector.
///
/// Requires `(A_i^cl) v1 = lambda_i v1` within `residual_tol` for every
/// subsystem — that is what makes the restriction exact rather than an
/// approximation. Returns the reduced state matrices `U' A_i^cl U`, the
/// reduced input matrices `U' B_i`, and the complement `U` itself.
pub fn reduce_dimension(
    a_cl_list: &[DMatrix<f64>],
    b_list: &[DMatrix<f64>],
    v1: &DVector<f64>,
    lambda: &[f64],
    pol: &TolerancePolicy,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>), DesignError> {
    let n = v1.len();
    if a_cl_list.len() != b_list.len() || a_cl_list.len() != lambda.len() {
        return Err(DesignError::Shape {
            detail: format!(
                "got {} closed loops, {} input matrices, {} eigenvalues",
                a_cl_list.len(),
                b_list.len(),
                lambda.len()
            ),
        });
    }
    for (i, (a, b)) in a_cl_list.iter().zip(b_list).enumerate() {
        if a.nrows() != n || a.ncols() != n || b.nrows() != n {
            return Err(DesignError::Shape {
                detail: format!(
                    "subsystem {}: A is {}x{}, B has {} rows, eigenvector has length {n}",
                    i + 1,
                    a.nrows(),
                    a.ncols(),
                    b.nrows()
                ),
            });
        }
        let residual = (a * v1 - lambda[i] * v1).norm();
        if !(residual <= pol.residual_tol) {
            return Err(DesignError::EigenvectorPrecondition {
                subsystem: i + 1,
                residual,
            });
        }
    }
    let u = linalg::unitary_complement(v1, pol).map_err(|e| DesignError::Shape {
        detail: e.to_string(),
    })?;
    let a_next = a_cl_list.iter().map(|a| u.transpose() * a * &u).collect();
    let b_next = b_list.iter().map(|b| u.transpose() * b).collect();
    Ok((a_next, b_next, u))
}

/// Pulls a reduced feedback back to full size and adds it to the
/// accumulated gain: `K + F U_product'`, where `U_product` is the embedding
/// of the current reduced space into the original coordinates.
///
/// Shape mismatches are programming errors and panic.
pub fn accumulate_gain(
    k_prev: &DMatrix<f64>,
    f: &DMatrix<f64>,
    u_product: &DMatrix<f64>,
) -> DMatrix<f64> {
    assert_eq!(
        f.ncols(),
        u_product.ncols(),
        "feedback acts on the reduced space the embedding maps to"
    );
    assert_eq!(
        k_prev.ncols(),
        u_product.nrows(),
        "gain and embedding must share the full state dimension"
    );
    assert_eq!(k_prev.nrows(), f.nrows(), "input dimension mismatch");
    k_prev + f * u_product.transpose()
}

/// Assembles the orthogonal transformation from the per-iteration
/// eigenvectors and complements: column `l` is the iteration-`l` eigenvector
/// embedded back into the original coordinates.
pub fn assemble_transformation(
    v1_list: &[DVector<f64>],
    u_list: &[DMatrix<f64>],
) -> Result<DMatrix<f64>, DesignError> {
    let n = match v1_list.first() {
        Some(v) => v.len(),
        None => {
            return Err(DesignError::Shape {
                detail: "no eigenvectors to assemble".into(),
            })
        }
    };
    if v1_list.len() != n || u_list.len() + 1 != n {
        return Err(DesignError::Shape {
            detail: format!(
                "need {n} eigenvectors and {} complements for dimension {n}, got {} and {}",
                n - 1,
                v1_list.len(),
                u_list.len()
            ),
        });
    }
    let mut t = DMatrix::zeros(n, n);
    let mut embedding = DMatrix::identity(n, n);
    for (ell, v1) in v1_list.iter().enumerate() {
        if v1.len() != n - ell {
            return Err(DesignError::Shape {
                detail: format!(
                    "eigenvector {} has length {}, expected {}",
                    ell + 1,
                    v1.len(),
                    n - ell
                ),
            });
        }
        t.column_mut(ell).copy_from(&(&embedding * v1));
        if ell + 1 < n {
            embedding = embedding * &u_list[ell];
        }
    }
    Ok(t)
}

/// Runs the full design loop on a validated system.
///
/// On success the result carries the gains `K_i`, the orthogonal
/// transformation `T`, the assigned eigenvalue schedule (row `l`, column
/// `i`), and one [`IterationRecord`] per iteration. On failure the error
/// names the failing iteration and carries the records of all completed
/// iterations.
pub fn design(
    sys: &SwitchedSystem,
    cfg: &DesignConfig,
    pol: &TolerancePolicy,
) -> Result<DesignResult, DesignError> {
    let n = sys.n();
    let n_subsystems = sys.num_subsystems();
    validate_config(cfg, n)?;

    let mut a_cur = sys.a_matrices();
    let mut b_cur = sys.b_matrices();
    let mut gains: Vec<DMatrix<f64>> = sys
        .iter()
        .map(|s| DMatrix::zeros(s.input_dim(), n))
        .collect();
    let mut embedding = DMatrix::identity(n, n);
    let mut v1_list: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut u_list: Vec<DMatrix<f64>> = Vec::with_capacity(n - 1);
    let mut records: Vec<IterationRecord> = Vec::with_capacity(n);
    let mut assigned = DMatrix::zeros(n, n_subsystems);

    for ell in 1..=n {
        let n_ell = n - ell + 1;
        let lambda = cfg.lambda.eigenvalues_for(ell, n_subsystems);
        let input = CeaInput::new(a_cur.clone(), b_cur.clone(), lambda)
            .map_err(|source| DesignError::Failed {
                iteration: ell,
                source,
                records: records.clone(),
            })?;
        let probe_seed = seeds::derive_seed(cfg.seed, ell as u64);
        let out = cea::cea_with_probe(&input, pol, cfg.kernel_index, cfg.probe_budget, probe_seed)
            .map_err(|source| DesignError::Failed {
                iteration: ell,
                source,
                records: records.clone(),
            })?;

        let p_ell = cea::compute_p(n_ell, &out.m_ranks);
        let v1_in_all_images = b_cur.iter().all(|b| {
            let image = linalg::image_basis(b, pol);
            image.contains_vector(&out.v1, pol).unwrap_or(false)
        });

        let subspace_diagnostics = if cfg.diagnostic_subspaces {
            Some(compute_diagnostics(&a_cur, &b_cur, &out.v1, pol))
        } else {
            None
        };

        for (k, f) in gains.iter_mut().zip(&out.f_list) {
            *k = accumulate_gain(k, f, &embedding);
        }
        for (i, &l) in out.lambda.iter().enumerate() {
            assigned[(ell - 1, i)] = l;
        }

        let mut record = IterationRecord {
            ell,
            n_ell,
            lambda: out.lambda.clone(),
            probed: out.probed,
            v1: out.v1.clone(),
            f_list: out.f_list.clone(),
            m_ranks: out.m_ranks.clone(),
            p_ell,
            kernel_dim: out.kernel_dim,
            v1_in_all_images,
            residuals: out.residuals.clone(),
            subspace_diagnostics,
        };

        if ell < n {
            let a_cl: Vec<DMatrix<f64>> = a_cur
                .iter()
                .zip(&b_cur)
                .zip(&out.f_list)
                .map(|((a, b), f)| a + b * f)
                .collect();
            let (a_next, b_next, u) = reduce_dimension(&a_cl, &b_cur, &out.v1, &out.lambda, pol)?;
            if let Some(diag) = record.subspace_diagnostics.as_mut() {
                project_diagnostics(diag, &a_cur, &b_cur, &u, pol);
            }
            a_cur = a_next;
            b_cur = b_next;
            embedding = embedding * &u;
            u_list.push(u);
        }
        v1_list.push(out.v1);
        records.push(record);
    }

    let transformation = assemble_transformation(&v1_list, &u_list)?;
    Ok(DesignResult {
        design: FeedbackDesign {
            gains,
            assigned_eigenvalues: assigned,
            transformation,
        },
        records,
    })
}

fn validate_config(cfg: &DesignConfig, n: usize) -> Result<(), DesignError> {
    if let LambdaSchedule::PerIteration(v) = &cfg.lambda {
        if v.len() != n {
            return Err(DesignError::InvalidConfig {
                detail: format!(
                    "per-iteration schedule has {} values but the system has dimension {n}",
                    v.len()
                ),
            });
        }
    }
    for value in cfg.lambda.values() {
        if !(value.abs() < 1.0) {
            return Err(DesignError::InvalidConfig {
                detail: format!("assigned eigenvalue {value} is not strictly inside the unit interval"),
            });
        }
    }
    Ok(())
}

fn compute_diagnostics(
    a_list: &[DMatrix<f64>],
    b_list: &[DMatrix<f64>],
    v1: &DVector<f64>,
    pol: &TolerancePolicy,
) -> SubspaceDiagnostics {
    let mut rho = Vec::with_capacity(a_list.len());
    let mut v1_in_assignable = Vec::with_capacity(a_list.len());
    for (a, b) in a_list.iter().zip(b_list) {
        let s = structural::assignable_subspace(a, b, pol);
        rho.push(s.dim());
        v1_in_assignable.push(s.contains_vector(v1, pol).unwrap_or(false));
    }
    SubspaceDiagnostics {
        rho,
        v1_in_assignable,
        projected_rho: Vec::new(),
    }
}

fn project_diagnostics(
    diag: &mut SubspaceDiagnostics,
    a_list: &[DMatrix<f64>],
    b_list: &[DMatrix<f64>],
    u: &DMatrix<f64>,
    pol: &TolerancePolicy,
) {
    diag.projected_rho = a_list
        .iter()
        .zip(b_list)
        .map(|(a, b)| {
            let s = structural::assignable_subspace(a, b, pol);
            linalg::image_basis(&(u.transpose() * s.basis()), pol).dim()
        })
        .collect();
}
