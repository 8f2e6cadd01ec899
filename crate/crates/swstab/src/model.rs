//! Switched-system domain types, their JSON wire formats, and closed-loop
//! assembly.
//!
//! A switched system is a finite family of discrete-time linear subsystems
//! `x(k+1) = A_i x(k) + B_i u(k)` sharing one state dimension; at each step
//! an arbitrary switching signal picks which subsystem is active. Validation
//! happens at construction: every `B_i` must have full column rank and every
//! pair `(A_i, B_i)` must be controllable, so the design pipeline never has
//! to re-check its inputs. Matrices are serialized as row-major nested
//! arrays, which keeps files readable and diffable; numbers round-trip
//! bit-exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, TolerancePolicy};

/// Errors from parsing, validating, or assembling systems and designs.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to parse JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("system must contain at least one subsystem")]
    EmptySystem,
    #[error("state dimension must be at least 1")]
    ZeroStateDimension,
    #[error("{matrix}_{subsystem} is not rectangular: row {row} has {got} entries, expected {expected}")]
    JaggedMatrix {
        subsystem: usize,
        matrix: &'static str,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("{matrix}_{subsystem} has a non-finite entry")]
    NonFiniteEntry { subsystem: usize, matrix: &'static str },
    #[error("dimension mismatch in subsystem {subsystem}: {detail}")]
    DimensionMismatch { subsystem: usize, detail: String },
    #[error("B_{subsystem} rank-deficient")]
    RankDeficientInput { subsystem: usize },
    #[error("subsystem {subsystem} is uncontrollable")]
    Uncontrollable { subsystem: usize },
    #[error("gain K_{subsystem} has shape {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    GainShape {
        subsystem: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("design has {gains} gain matrices but the system has {subsystems} subsystems")]
    GainCount { gains: usize, subsystems: usize },
    #[error("transformation matrix is not orthogonal: |T'T - I| = {residual:e}")]
    NotOrthogonal { residual: f64 },
    #[error("design is internally inconsistent: {detail}")]
    MalformedDesign { detail: String },
}

/// One mode of a switched system: the pair `(A_i, B_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl Subsystem {
    /// State matrix `A_i` (`n x n`).
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Input matrix `B_i` (`n x m_i`, full column rank).
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Number of inputs `m_i`.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// A validated switched linear system.
///
/// Invariants established at construction and preserved thereafter: at least
/// one subsystem, every `A_i` is `n x n`, every `B_i` is `n x m_i` with full
/// column rank `m_i >= 1`, and every pair `(A_i, B_i)` is controllable.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystem {
    n: usize,
    subsystems: Vec<Subsystem>,
}

impl SwitchedSystem {
    /// Builds a system from `(A_i, B_i)` pairs, validating every invariant.
    /// Subsystems are reported 1-based in errors, matching the file format.
    pub fn new(
        pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>,
        pol: &TolerancePolicy,
    ) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptySystem);
        }
        let n = pairs[0].0.nrows();
        if n == 0 {
            return Err(ModelError::ZeroStateDimension);
        }
        let mut subsystems = Vec::with_capacity(pairs.len());
        for (idx, (a, b)) in pairs.into_iter().enumerate() {
            let label = idx + 1;
            if a.nrows() != n || a.ncols() != n {
                return Err(ModelError::DimensionMismatch {
                    subsystem: label,
                    detail: format!("A_{label} is {}x{}, expected {n}x{n}", a.nrows(), a.ncols()),
                });
            }
            if b.nrows() != n {
                return Err(ModelError::DimensionMismatch {
                    subsystem: label,
                    detail: format!("B_{label} has {} rows, expected {n}", b.nrows()),
                });
            }
            if b.ncols() == 0 {
                return Err(ModelError::DimensionMismatch {
                    subsystem: label,
                    detail: format!("B_{label} has no columns; every subsystem needs an input"),
                });
            }
            if b.ncols() > n {
                return Err(ModelError::DimensionMismatch {
                    subsystem: label,
                    detail: format!(
                        "B_{label} has {} columns but only {n} rows, so it cannot have full column rank",
                        b.ncols()
                    ),
                });
            }
            for (name, m) in [("A", &a), ("B", &b)] {
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFiniteEntry {
                        subsystem: label,
                        matrix: name,
                    });
                }
            }
            if linalg::numeric_rank(&b, pol) != b.ncols() {
                return Err(ModelError::RankDeficientInput { subsystem: label });
            }
            if !is_controllable(&a, &b, pol) {
                return Err(ModelError::Uncontrollable { subsystem: label });
            }
            subsystems.push(Subsystem { a, b });
        }
        Ok(SwitchedSystem { n, subsystems })
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of subsystems `N`.
    pub fn num_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    /// Input dimensions `(m_1, ..., m_N)`.
    pub fn input_dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(Subsystem::input_dim).collect()
    }

    /// The `i`-th subsystem, 0-based.
    pub fn subsystem(&self, i: usize) -> &Subsystem {
        &self.subsystems[i]
    }

    /// Iterator over subsystems in order.
    pub fn iter(&self) -> impl Iterator<Item = &Subsystem> {
        self.subsystems.iter()
    }

    /// The state matrices in order.
    pub fn a_matrices(&self) -> Vec<DMatrix<f64>> {
        self.subsystems.iter().map(|s| s.a.clone()).collect()
    }

    /// The input matrices in order.
    pub fn b_matrices(&self) -> Vec<DMatrix<f64>> {
        self.subsystems.iter().map(|s| s.b.clone()).collect()
    }
}

/// Whether `(A, B)` is controllable: the staircase of images of
/// `[B, AB, ..., A^{n-1}B]` must reach the full state space.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>, pol: &TolerancePolicy) -> bool {
    let n = a.nrows();
    controllability_staircase(a, b, pol).last().copied() == Some(n)
}

/// Ranks of the truncated controllability matrices
/// `[B], [B, AB], ..., [B, AB, ..., A^{n-1}B]`, in order. The sequence is
/// non-decreasing and stabilizes once it stops growing.
pub(crate) fn controllability_staircase(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    pol: &TolerancePolicy,
) -> Vec<usize> {
    let n = a.nrows();
    let m = b.ncols();
    let mut block = b.clone();
    let mut stacked = DMatrix::zeros(n, n * m);
    let mut ranks = Vec::with_capacity(n);
    for k in 0..n {
        stacked.view_mut((0, k * m), (n, m)).copy_from(&block);
        let truncated = stacked.columns(0, (k + 1) * m).into_owned();
        ranks.push(linalg::numeric_rank(&truncated, pol));
        if k + 1 < n {
            block = a * block;
        }
    }
    ranks
}

/// A feedback design: one gain per subsystem, the orthogonal transformation
/// that exhibits the common triangular structure, and the eigenvalues
/// assigned at each step (row `l`, column `i` is the value assigned for
/// subsystem `i` at step `l`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackDesign {
    /// Feedback gains `K_i` (`m_i x n`), applied as `u = K_i x`.
    pub gains: Vec<DMatrix<f64>>,
    /// Assigned eigenvalue schedule (`n x N`).
    pub assigned_eigenvalues: DMatrix<f64>,
    /// Orthogonal matrix `T` triangularising every closed loop (`n x n`).
    pub transformation: DMatrix<f64>,
}

/// Closed-loop state matrices `A_i + B_i K_i` for a design on a system.
pub fn closed_loop(
    sys: &SwitchedSystem,
    design: &FeedbackDesign,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    if design.gains.len() != sys.num_subsystems() {
        return Err(ModelError::GainCount {
            gains: design.gains.len(),
            subsystems: sys.num_subsystems(),
        });
    }
    let n = sys.n();
    let mut out = Vec::with_capacity(design.gains.len());
    for (idx, (sub, k)) in sys.iter().zip(&design.gains).enumerate() {
        let m = sub.input_dim();
        if k.nrows() != m || k.ncols() != n {
            return Err(ModelError::GainShape {
                subsystem: idx + 1,
                rows: k.nrows(),
                cols: k.ncols(),
                expected_rows: m,
                expected_cols: n,
            });
        }
        out.push(sub.a() + sub.b() * k);
    }
    Ok(out)
}

/// One step of the design iteration, kept for diagnostics and trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration number, 1-based; the active dimension is `n - ell + 1`.
    pub ell: usize,
    /// Dimension of the reduced system at this iteration.
    pub n_ell: usize,
    /// Eigenvalues actually assigned (one per subsystem; differs from the
    /// configured schedule when the probe fallback fired).
    pub lambda: Vec<f64>,
    /// Whether the eigenvalues came from random probing rather than the
    /// configured schedule.
    pub probed: bool,
    /// Common unit eigenvector in the reduced coordinates.
    #[serde(with = "wire::vec")]
    pub v1: DVector<f64>,
    /// Per-subsystem feedbacks in the reduced coordinates (`m_i x n_ell`).
    #[serde(with = "wire::mat_list")]
    pub f_list: Vec<DMatrix<f64>>,
    /// Input ranks `m_i` of the reduced subsystems.
    pub m_ranks: Vec<usize>,
    /// Structural index `p = n_ell + sum(m_ranks) - N * n_ell`.
    pub p_ell: i64,
    /// Numerical dimension of the kernel the eigenvector was drawn from.
    pub kernel_dim: usize,
    /// Whether the chosen eigenvector lies in the image of every reduced
    /// input matrix (the condition under which `p` must drop by one).
    pub v1_in_all_images: bool,
    /// Per-subsystem residuals of the eigenvector assignment.
    pub residuals: Vec<f64>,
    /// Assignable-subspace diagnostics, present only when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subspace_diagnostics: Option<SubspaceDiagnostics>,
}

/// Optional per-iteration diagnostics tracking the assignable subspaces
/// `S_i = {v in img B_i : A_i v in img B_i}` through the reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDiagnostics {
    /// Dimensions of the assignable subspaces at this iteration.
    pub rho: Vec<usize>,
    /// Whether the chosen eigenvector lies in each assignable subspace.
    pub v1_in_assignable: Vec<bool>,
    /// Dimensions of the assignable subspaces projected into the next
    /// reduced space (empty at the final iteration).
    pub projected_rho: Vec<usize>,
}

mod file {
    //! Serde mirror structs pinning the exact wire schema.

    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    pub(super) struct SystemFile {
        pub n: usize,
        pub subsystems: Vec<SubsystemFile>,
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct SubsystemFile {
        #[serde(rename = "A")]
        pub a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        pub b: Vec<Vec<f64>>,
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct DesignFile {
        pub gains: Vec<Vec<Vec<f64>>>,
        pub transformation: Vec<Vec<f64>>,
        pub assigned_eigenvalues: Vec<Vec<f64>>,
    }
}

/// Serde adapters mapping nalgebra types to row-major nested arrays.
pub mod wire {
    use nalgebra::{DMatrix, DVector};

    /// A matrix as a row-major `Vec<Vec<f64>>`.
    pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    /// A row-major `Vec<Vec<f64>>` back into a matrix. Returns `None` when
    /// the rows are jagged. A zero-row input yields a `0 x 0` matrix.
    pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
        let nrows = rows.len();
        if nrows == 0 {
            return Some(DMatrix::zeros(0, 0));
        }
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            return None;
        }
        Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub(crate) mod vec {
        use super::*;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }

    pub(crate) mod mat_list {
        use super::*;
        use serde::de::Error;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(matrix_to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            raw.iter()
                .map(|rows| rows_to_matrix(rows).ok_or_else(|| D::Error::custom("jagged matrix")))
                .collect()
        }
    }

    pub(crate) mod opt_mat {
        use super::*;
        use serde::de::Error;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(
            v: &Option<DMatrix<f64>>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            v.as_ref().map(|m| matrix_to_rows(m)).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DMatrix<f64>>, D::Error> {
            match Option::<Vec<Vec<f64>>>::deserialize(d)? {
                None => Ok(None),
                Some(rows) => rows_to_matrix(&rows)
                    .map(Some)
                    .ok_or_else(|| D::Error::custom("jagged matrix")),
            }
        }
    }
}

/// Parses and validates a system from its JSON representation.
pub fn system_from_json(json: &str, pol: &TolerancePolicy) -> Result<SwitchedSystem, ModelError> {
    let raw: file::SystemFile = serde_json::from_str(json)?;
    if raw.subsystems.is_empty() {
        return Err(ModelError::EmptySystem);
    }
    let mut pairs = Vec::with_capacity(raw.subsystems.len());
    for (idx, sub) in raw.subsystems.iter().enumerate() {
        let label = idx + 1;
        let a = parse_matrix(&sub.a, label, "A")?;
        let b = parse_matrix(&sub.b, label, "B")?;
        if a.nrows() != raw.n {
            return Err(ModelError::DimensionMismatch {
                subsystem: label,
                detail: format!(
                    "A_{label} has {} rows but the file declares n = {}",
                    a.nrows(),
                    raw.n
                ),
            });
        }
        pairs.push((a, b));
    }
    SwitchedSystem::new(pairs, pol)
}

fn parse_matrix(
    rows: &[Vec<f64>],
    subsystem: usize,
    name: &'static str,
) -> Result<DMatrix<f64>, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::DimensionMismatch {
            subsystem,
            detail: format!("{name}_{subsystem} has no rows"),
        });
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(ModelError::JaggedMatrix {
                subsystem,
                matrix: name,
                row: i,
                got: r.len(),
                expected: ncols,
            });
        }
    }
    wire::rows_to_matrix(rows).ok_or(ModelError::JaggedMatrix {
        subsystem,
        matrix: name,
        row: 0,
        got: 0,
        expected: ncols,
    })
}

/// Serializes a system to pretty-printed JSON in the documented schema.
pub fn system_to_json(sys: &SwitchedSystem) -> String {
    let raw = file::SystemFile {
        n: sys.n(),
        subsystems: sys
            .iter()
            .map(|s| file::SubsystemFile {
                a: wire::matrix_to_rows(s.a()),
                b: wire::matrix_to_rows(s.b()),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("system serialization cannot fail")
}

/// Parses and validates a design from its JSON representation: the
/// transformation must be square and orthogonal, and the eigenvalue schedule
/// must cover every subsystem at every step.
pub fn design_from_json(json: &str, pol: &TolerancePolicy) -> Result<FeedbackDesign, ModelError> {
    let raw: file::DesignFile = serde_json::from_str(json)?;
    let t = wire::rows_to_matrix(&raw.transformation).ok_or(ModelError::MalformedDesign {
        detail: "transformation matrix is jagged".into(),
    })?;
    let n = t.nrows();
    if t.ncols() != n || n == 0 {
        return Err(ModelError::MalformedDesign {
            detail: format!("transformation must be square and nonempty, got {}x{}", n, t.ncols()),
        });
    }
    let residual = (t.transpose() * &t - DMatrix::identity(n, n)).norm();
    if residual > pol.residual_tol {
        return Err(ModelError::NotOrthogonal { residual });
    }
    let mut gains = Vec::with_capacity(raw.gains.len());
    for (idx, rows) in raw.gains.iter().enumerate() {
        let k = wire::rows_to_matrix(rows).ok_or(ModelError::MalformedDesign {
            detail: format!("gain {} is jagged", idx + 1),
        })?;
        if k.ncols() != n {
            return Err(ModelError::GainShape {
                subsystem: idx + 1,
                rows: k.nrows(),
                cols: k.ncols(),
                expected_rows: k.nrows(),
                expected_cols: n,
            });
        }
        gains.push(k);
    }
    if gains.is_empty() {
        return Err(ModelError::MalformedDesign {
            detail: "design contains no gains".into(),
        });
    }
    let assigned = wire::rows_to_matrix(&raw.assigned_eigenvalues).ok_or(
        ModelError::MalformedDesign {
            detail: "assigned_eigenvalues is jagged".into(),
        },
    )?;
    if assigned.nrows() != n || assigned.ncols() != gains.len() {
        return Err(ModelError::MalformedDesign {
            detail: format!(
                "assigned_eigenvalues is {}x{}, expected {}x{}",
                assigned.nrows(),
                assigned.ncols(),
                n,
                gains.len()
            ),
        });
    }
    Ok(FeedbackDesign {
        gains,
        assigned_eigenvalues: assigned,
        transformation: t,
    })
}

/// Serializes a design to pretty-printed JSON in the documented schema.
pub fn design_to_json(design: &FeedbackDesign) -> String {
    let raw = file::DesignFile {
        gains: design.gains.iter().map(wire::matrix_to_rows).collect(),
        transformation: wire::matrix_to_rows(&design.transformation),
        assigned_eigenvalues: wire::matrix_to_rows(&design.assigned_eigenvalues),
    };
    serde_json::to_string_pretty(&raw).expect("design serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pol() -> TolerancePolicy {
        TolerancePolicy::default()
    }

    /// Hand-rolled triple-loop matrix product, used as an oracle so the
    /// closed-loop assembly is not tested against itself.
    fn matmul_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = 0.0;
                for k in 0..a.ncols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn loads_a_valid_single_subsystem_file() {
        let json = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0], [0.0]]}]}"#;
        let sys = system_from_json(json, &pol()).unwrap();
        assert_eq!(sys.n(), 2);
        assert_eq!(sys.num_subsystems(), 1);
        assert_eq!(sys.input_dims(), vec![1]);
        assert_eq!(sys.subsystem(0).a()[(0, 1)], 1.0);
    }

    #[test]
    fn rejects_rank_deficient_input_matrix() {
        let json = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0, 2.0], [0.0, 0.0]]}]}"#;
        let err = system_from_json(json, &pol()).unwrap_err();
        assert!(matches!(err, ModelError::RankDeficientInput { subsystem: 1 }));
        assert!(err.to_string().contains("B_1 rank-deficient"));
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let json = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0], [0.0], [0.0]]}]}"#;
        let err = system_from_json(json, &pol()).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { subsystem: 1, .. }));
    }

    #[test]
    fn rejects_uncontrollable_pairs() {
        // A = I leaves span(B) invariant, so (I, e1) is uncontrollable for n > 1.
        let json = r#"{"n": 2, "subsystems": [{"A": [[1.0, 0.0], [0.0, 1.0]], "B": [[1.0], [0.0]]}]}"#;
        let err = system_from_json(json, &pol()).unwrap_err();
        assert!(matches!(err, ModelError::Uncontrollable { subsystem: 1 }));
    }

    #[test]
    fn rejects_jagged_and_empty_inputs() {
        let jagged = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0]], "B": [[1.0], [0.0]]}]}"#;
        assert!(matches!(
            system_from_json(jagged, &pol()).unwrap_err(),
            ModelError::JaggedMatrix { .. }
        ));
        let empty = r#"{"n": 2, "subsystems": []}"#;
        assert!(matches!(
            system_from_json(empty, &pol()).unwrap_err(),
            ModelError::EmptySystem
        ));
    }

    #[test]
    fn rejects_declared_n_disagreeing_with_matrices() {
        let json = r#"{"n": 3, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0], [0.0]]}]}"#;
        assert!(matches!(
            system_from_json(json, &pol()).unwrap_err(),
            ModelError::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn closed_loop_with_zero_gain_is_open_loop() {
        let json = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0], [0.0]]}]}"#;
        let sys = system_from_json(json, &pol()).unwrap();
        let design = FeedbackDesign {
            gains: vec![DMatrix::zeros(1, 2)],
            assigned_eigenvalues: DMatrix::zeros(2, 1),
            transformation: DMatrix::identity(2, 2),
        };
        let cl = closed_loop(&sys, &design).unwrap();
        assert_eq!(cl[0], *sys.subsystem(0).a());
    }

    #[test]
    fn closed_loop_scalar_example() {
        let json = r#"{"n": 1, "subsystems": [{"A": [[2.0]], "B": [[1.0]]}]}"#;
        let sys = system_from_json(json, &pol()).unwrap();
        let design = FeedbackDesign {
            gains: vec![DMatrix::from_row_slice(1, 1, &[-1.5])],
            assigned_eigenvalues: DMatrix::from_row_slice(1, 1, &[0.5]),
            transformation: DMatrix::identity(1, 1),
        };
        let cl = closed_loop(&sys, &design).unwrap();
        assert_eq!(cl[0][(0, 0)], 0.5);
    }

    #[test]
    fn closed_loop_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11_01);
        for _ in 0..10 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let b = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let Ok(sys) = SwitchedSystem::new(vec![(a.clone(), b.clone())], &pol()) else {
                continue; // astronomically unlikely, but keep the draw honest
            };
            let k = DMatrix::from_fn(2, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let design = FeedbackDesign {
                gains: vec![k.clone()],
                assigned_eigenvalues: DMatrix::zeros(3, 1),
                transformation: DMatrix::identity(3, 3),
            };
            let cl = closed_loop(&sys, &design).unwrap();
            let expected = &a + matmul_oracle(&b, &k);
            assert!((&cl[0] - &expected).norm() < 1e-12);
        }
    }

    #[test]
    fn closed_loop_is_linear_in_the_gain() {
        // With entries that are exactly representable sums of powers of two,
        // A + B(2K) - (A + BK) equals BK with no rounding at all.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.25, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let sys = SwitchedSystem::new(vec![(a, b.clone())], &pol()).unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[0.75, -0.5]);
        let mk = |g: DMatrix<f64>| FeedbackDesign {
            gains: vec![g],
            assigned_eigenvalues: DMatrix::zeros(2, 1),
            transformation: DMatrix::identity(2, 2),
        };
        let cl1 = closed_loop(&sys, &mk(k.clone())).unwrap();
        let cl2 = closed_loop(&sys, &mk(2.0 * &k)).unwrap();
        assert_eq!(&cl2[0] - &cl1[0], &b * &k);
    }

    #[test]
    fn closed_loop_rejects_wrong_gain_shapes() {
        let json = r#"{"n": 2, "subsystems": [{"A": [[0.0, 1.0], [1.0, 0.0]], "B": [[1.0], [0.0]]}]}"#;
        let sys = system_from_json(json, &pol()).unwrap();
        let design = FeedbackDesign {
            gains: vec![DMatrix::zeros(2, 2)],
            assigned_eigenvalues: DMatrix::zeros(2, 1),
            transformation: DMatrix::identity(2, 2),
        };
        assert!(matches!(
            closed_loop(&sys, &design).unwrap_err(),
            ModelError::GainShape { subsystem: 1, .. }
        ));
    }

    #[test]
    fn system_json_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11_02);
        for _ in 0..5 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let b = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let Ok(sys) = SwitchedSystem::new(vec![(a, b)], &pol()) else {
                continue;
            };
            let json = system_to_json(&sys);
            let back = system_from_json(&json, &pol()).unwrap();
            assert_eq!(sys, back);
            assert_eq!(json, system_to_json(&back));
        }
    }

    #[test]
    fn design_json_round_trips_bit_exactly() {
        let design = FeedbackDesign {
            gains: vec![
                DMatrix::from_row_slice(1, 2, &[0.1 + 0.2, -3.7e-11]),
                DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            ],
            assigned_eigenvalues: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, -0.125]),
            transformation: DMatrix::identity(2, 2),
        };
        let json = design_to_json(&design);
        let back = design_from_json(&json, &pol()).unwrap();
        assert_eq!(design, back);
        assert_eq!(json, design_to_json(&back));
    }

    #[test]
    fn design_load_rejects_non_orthogonal_transformation() {
        let design = FeedbackDesign {
            gains: vec![DMatrix::zeros(1, 2)],
            assigned_eigenvalues: DMatrix::zeros(2, 1),
            transformation: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        };
        let json = design_to_json(&design);
        assert!(matches!(
            design_from_json(&json, &pol()).unwrap_err(),
            ModelError::NotOrthogonal { .. }
        ));
    }

    #[test]
    fn controllability_staircase_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11_03);
        for _ in 0..10 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let b = DMatrix::from_fn(4, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let ranks = controllability_staircase(&a, &b, &pol());
            assert!(ranks.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(ranks.len(), 4);
        }
    }

    #[test]
    fn iteration_record_serialization_round_trips() {
        let record = IterationRecord {
            ell: 1,
            n_ell: 2,
            lambda: vec![0.5, 0.5],
            probed: false,
            v1: DVector::from_vec(vec![1.0, 0.0]),
            f_list: vec![DMatrix::from_row_slice(1, 2, &[0.25, -0.5])],
            m_ranks: vec![1, 1],
            p_ell: 0,
            kernel_dim: 1,
            v1_in_all_images: true,
            residuals: vec![1e-16, 2e-16],
            subspace_diagnostics: None,
        };
        let json = serde_json::to_string(&record).unwrap();
        let back: IterationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record, back);
        // The Option is skipped when absent, keeping traces compact.
        assert!(!json.contains("subspace_diagnostics"));
    }
}
