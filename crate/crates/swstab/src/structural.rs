//! Structural diagnostics: assignable eigenvector subspaces, their
//! dimensions via controllability indices, and the transversality check
//! that underwrites the a-priori solvability verdict.
//!
//! For one controllable pair `(A, B)`, the assignable subspace
//! `S = {v in img B : Av in img B}` collects the directions that feedback
//! can turn into eigenvectors at any eigenvalue. Its dimension `rho` equals
//! the number of controllability indices of `(A, B)` equal to one, which
//! for a generic pair is `m - (n mod m)` when `m > n/2` and zero otherwise.
//! When the tuple of assignable subspaces across subsystems is transverse
//! and `q_1 = n + sum(rho_i) - N n` is nonnegative, every iteration of the
//! design loop is guaranteed a common eigenvector — the verdict reported by
//! [`genericity_precheck`].

use nalgebra::DMatrix;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{self, SubspaceBasis, TolerancePolicy};
use crate::model::{self, SwitchedSystem};

/// Largest subsystem count for which the exhaustive subset enumeration in
/// [`transversality_check`] is allowed to run.
const MAX_SUBSET_SUBSYSTEMS: usize = 12;

/// Errors from the structural computations.
#[derive(Debug, Error)]
pub enum StructuralError {
    #[error("pair is uncontrollable: controllability matrix has rank {reached} of {needed}")]
    Uncontrollable { reached: usize, needed: usize },
    #[error("B must have full column rank for index computation")]
    RankDeficientInput,
    #[error(
        "assignable-dimension formulas disagree: {via_indices} indices equal one but the rank formula gives {via_rank}"
    )]
    FormulaDisagreement { via_indices: usize, via_rank: usize },
    #[error("subspace {index} lives in dimension {got}, expected {expected}")]
    AmbientMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("transversality check supports at most {MAX_SUBSET_SUBSYSTEMS} subspaces, got {got}")]
    TooManySubspaces { got: usize },
    #[error("no subspaces supplied")]
    Empty,
}

/// The assignable eigenvector subspace `S = img B ∩ {v : Av in img B}`.
///
/// The eigenvalue magnitude constraint does not shrink this set: scaling a
/// candidate eigenvalue toward zero stays feasible, so membership is purely
/// the two-image condition.
pub fn assignable_subspace(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    pol: &TolerancePolicy,
) -> SubspaceBasis {
    let image = linalg::image_basis(b, pol);
    let preimage = image
        .preimage(a, pol)
        .expect("A is square over the same space as img B");
    image
        .intersect(&preimage, pol)
        .expect("both subspaces live in the state space")
}

/// Controllability indices of a controllable pair, descending, summing to
/// `n`.
///
/// Computed as the conjugate partition of the rank increments of the
/// truncated controllability matrices: if adding the `k`-th power block
/// grows the rank by `r_k`, then the number of indices exceeding `k` is
/// `r_k`, which pins the whole multiset.
pub fn controllability_indices(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    pol: &TolerancePolicy,
) -> Result<Vec<usize>, StructuralError> {
    let n = a.nrows();
    let m = b.ncols();
    if linalg::numeric_rank(b, pol) != m {
        return Err(StructuralError::RankDeficientInput);
    }
    let ranks = model::controllability_staircase(a, b, pol);
    let reached = ranks.last().copied().unwrap_or(0);
    if reached != n {
        return Err(StructuralError::Uncontrollable { reached, needed: n });
    }
    let mut increments = Vec::with_capacity(n);
    let mut prev = 0;
    for &r in &ranks {
        increments.push(r - prev);
        prev = r;
    }
    // Conjugate partition: index j (1-based over inputs) counts how many
    // increments are at least j.
    let mut indices: Vec<usize> = (1..=m)
        .map(|j| increments.iter().filter(|&&r| r >= j).count())
        .collect();
    indices.sort_unstable_by(|x, y| y.cmp(x));
    debug_assert_eq!(indices.iter().sum::<usize>(), n);
    Ok(indices)
}

/// The dimension of the assignable subspace by its two index-theoretic
/// characterizations: the number of controllability indices equal to one,
/// cross-checked against `2m - rank([beta, A beta])` with `beta` an
/// orthonormal image basis of `B`. Disagreement between the two is reported
/// as an error, never resolved silently.
pub fn rho_via_indices(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    pol: &TolerancePolicy,
) -> Result<usize, StructuralError> {
    let indices = controllability_indices(a, b, pol)?;
    let via_indices = indices.iter().filter(|&&k| k == 1).count();

    let beta = linalg::image_basis(b, pol);
    let m = beta.dim();
    let mut stacked = DMatrix::zeros(a.nrows(), 2 * m);
    stacked
        .view_mut((0, 0), (a.nrows(), m))
        .copy_from(beta.basis());
    stacked
        .view_mut((0, m), (a.nrows(), m))
        .copy_from(&(a * beta.basis()));
    let via_rank = 2 * m - linalg::numeric_rank(&stacked, pol);

    if via_indices != via_rank {
        return Err(StructuralError::FormulaDisagreement {
            via_indices,
            via_rank,
        });
    }
    Ok(via_indices)
}

/// Intersection and sum dimensions for one subset of subspaces, against the
/// generic expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetDims {
    /// 1-based indices of the subset members, ascending.
    pub subset: Vec<usize>,
    pub intersection_dim: usize,
    pub sum_dim: usize,
    /// Generic intersection dimension `max(0, sum(d_i) - (|J|-1) * dim X)`.
    pub expected_intersection_dim: usize,
    /// Generic sum dimension `min(dim X, sum(d_i))`.
    pub expected_sum_dim: usize,
    /// Whether both dimensions match their generic values.
    pub transverse: bool,
}

/// Checks the tuple for transversality: every nonempty subset must attain
/// the generic (minimal) intersection dimension and the generic (maximal)
/// sum dimension. Returns the overall verdict and the full per-subset
/// table, ordered by subset size then lexicographically.
pub fn transversality_check(
    subspaces: &[SubspaceBasis],
    pol: &TolerancePolicy,
) -> Result<(bool, Vec<SubsetDims>), StructuralError> {
    let count = subspaces.len();
    if count == 0 {
        return Err(StructuralError::Empty);
    }
    if count > MAX_SUBSET_SUBSYSTEMS {
        return Err(StructuralError::TooManySubspaces { got: count });
    }
    let ambient = subspaces[0].ambient_dim();
    for (i, s) in subspaces.iter().enumerate() {
        if s.ambient_dim() != ambient {
            return Err(StructuralError::AmbientMismatch {
                index: i + 1,
                got: s.ambient_dim(),
                expected: ambient,
            });
        }
    }

    let mut masks: Vec<u32> = (1..(1u32 << count)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));

    let mut table = Vec::with_capacity(masks.len());
    let mut all_ok = true;
    for mask in masks {
        let members: Vec<usize> = (0..count).filter(|i| mask & (1 << i) != 0).collect();
        let mut dim_sum = 0usize;
        let mut cap: Option<SubspaceBasis> = None;
        let mut cup: Option<SubspaceBasis> = None;
        for &i in &members {
            dim_sum += subspaces[i].dim();
            cap = Some(match cap {
                None => subspaces[i].clone(),
                Some(acc) => acc
                    .intersect(&subspaces[i], pol)
                    .expect("ambient dimensions were checked"),
            });
            cup = Some(match cup {
                None => subspaces[i].clone(),
                Some(acc) => acc
                    .sum(&subspaces[i], pol)
                    .expect("ambient dimensions were checked"),
            });
        }
        let intersection_dim = cap.expect("subset is nonempty").dim();
        let sum_dim = cup.expect("subset is nonempty").dim();
        let cardinality = members.len();
        let expected_intersection_dim = (ambient as i64 + dim_sum as i64
            - cardinality as i64 * ambient as i64)
            .max(0) as usize;
        let expected_sum_dim = ambient.min(dim_sum);
        let transverse = intersection_dim == expected_intersection_dim && sum_dim == expected_sum_dim;
        all_ok &= transverse;
        table.push(SubsetDims {
            subset: members.iter().map(|i| i + 1).collect(),
            intersection_dim,
            sum_dim,
            expected_intersection_dim,
            expected_sum_dim,
            transverse,
        });
    }
    Ok((all_ok, table))
}

/// The generic value of `rho` for an `(n, m)` profile: the closed form
/// `m - (n mod m)` applies only when `m > n/2`; below that the generic value
/// is zero and the formula is out of scope, marked instead of computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenericRho {
    Value(usize),
    NoGenericFormula,
}

impl GenericRho {
    /// The expected generic dimension for state dimension `n` and input
    /// dimension `m`.
    pub fn for_profile(n: usize, m: usize) -> Self {
        if 2 * m > n {
            GenericRho::Value(m - (n % m))
        } else {
            GenericRho::NoGenericFormula
        }
    }
}

impl Serialize for GenericRho {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            GenericRho::Value(v) => serializer.serialize_u64(*v as u64),
            GenericRho::NoGenericFormula => serializer.serialize_str("no-generic-formula"),
        }
    }
}

impl<'de> Deserialize<'de> for GenericRho {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RhoVisitor;
        impl<'de> Visitor<'de> for RhoVisitor {
            type Value = GenericRho;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a nonnegative integer or the string \"no-generic-formula\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<GenericRho, E> {
                Ok(GenericRho::Value(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<GenericRho, E> {
                if v < 0 {
                    return Err(E::custom("generic rho cannot be negative"));
                }
                Ok(GenericRho::Value(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<GenericRho, E> {
                if v == "no-generic-formula" {
                    Ok(GenericRho::NoGenericFormula)
                } else {
                    Err(E::custom(format!("unknown marker {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(RhoVisitor)
    }
}

/// The a-priori solvability report for a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericityReport {
    /// Dimensions of the assignable subspaces, one per subsystem.
    pub rho: Vec<usize>,
    /// `q_1 = n + sum(rho_i) - N n`.
    pub q1: i64,
    /// Whether the tuple of assignable subspaces is transverse.
    pub transverse: bool,
    /// Generic expectations for each `(n, m_i)` profile.
    pub rho_expected: Vec<GenericRho>,
    /// `transverse && q1 >= 0`: when true, the design loop is guaranteed a
    /// common eigenvector at every iteration.
    pub verdict: bool,
    /// Intersection/sum dimensions for every nonempty subset.
    pub per_subset_dims: Vec<SubsetDims>,
}

/// Computes the full a-priori report for a validated system. Never fails:
/// system validation already guarantees controllability, and the report is
/// diagnostic by nature.
pub fn genericity_precheck(sys: &SwitchedSystem, pol: &TolerancePolicy) -> GenericityReport {
    let n = sys.n();
    let n_subsystems = sys.num_subsystems();
    let subspaces: Vec<SubspaceBasis> = sys
        .iter()
        .map(|s| assignable_subspace(s.a(), s.b(), pol))
        .collect();
    let rho: Vec<usize> = subspaces.iter().map(SubspaceBasis::dim).collect();
    let q1 = n as i64 + rho.iter().map(|&r| r as i64).sum::<i64>()
        - (n_subsystems as i64) * (n as i64);
    let (transverse, per_subset_dims) = transversality_check(&subspaces, pol)
        .expect("a validated system has 1..=N consistent subsystems");
    let rho_expected = sys
        .input_dims()
        .iter()
        .map(|&m| GenericRho::for_profile(n, m))
        .collect();
    GenericityReport {
        rho,
        q1,
        transverse,
        verdict: transverse && q1 >= 0,
        rho_expected,
        per_subset_dims,
    }
}
