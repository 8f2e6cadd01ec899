//! Tolerance-disciplined numerical primitives: numeric rank, null spaces,
//! orthonormal complements, and subspace arithmetic.
//!
//! Every rank decision made anywhere in this crate flows through a
//! [`TolerancePolicy`] passed explicitly at the call site; there are no
//! hidden global thresholds. Subspaces are represented by orthonormal bases
//! ([`SubspaceBasis`]), never by projectors or implicit equation sets, so
//! dimensions are always explicit and comparisons reduce to small residual
//! checks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Thresholds governing every rank, residual, and membership decision.
///
/// `rank_rel_tol` is relative: a singular value counts as nonzero when it
/// exceeds `rank_rel_tol * sigma_max`. The other two are absolute thresholds
/// on residual norms of (near-)unit-scale quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TolerancePolicy {
    /// Relative singular-value cutoff for rank decisions.
    pub rank_rel_tol: f64,
    /// Residual threshold for equation and factorization checks.
    pub residual_tol: f64,
    /// Threshold for subspace membership and containment tests.
    pub angle_tol: f64,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        TolerancePolicy {
            rank_rel_tol: 1e-10,
            residual_tol: 1e-8,
            angle_tol: 1e-8,
        }
    }
}

impl TolerancePolicy {
    /// Builds a policy, rejecting non-positive thresholds.
    pub fn new(rank_rel_tol: f64, residual_tol: f64, angle_tol: f64) -> Result<Self, LinalgError> {
        for (name, value) in [
            ("rank_rel_tol", rank_rel_tol),
            ("residual_tol", residual_tol),
            ("angle_tol", angle_tol),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(LinalgError::NonPositiveTolerance { name, value });
            }
        }
        Ok(TolerancePolicy {
            rank_rel_tol,
            residual_tol,
            angle_tol,
        })
    }
}

/// Errors from the numerical primitives.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("tolerance {name} must be strictly positive and finite, got {value}")]
    NonPositiveTolerance { name: &'static str, value: f64 },
    #[error("ambient dimensions differ: {left} vs {right}")]
    AmbientMismatch { left: usize, right: usize },
    #[error("expected a vector of unit norm, got norm {norm}")]
    NonUnitVector { norm: f64 },
    #[error("operation undefined for the zero vector")]
    ZeroVector,
    #[error("ambient dimension must be at least 2 to complement a vector, got {dim}")]
    AmbientTooSmall { dim: usize },
    #[error("matrix has {given} columns but the basis requires {required} orthonormal columns")]
    NotOrthonormal { given: usize, required: usize },
    #[error("map has {rows} rows but the subspace lives in dimension {ambient}")]
    MapShape { rows: usize, ambient: usize },
}

/// Maximum number of cyclic Jacobi sweeps. One-sided Jacobi converges
/// quadratically once rotations become small; at the dimensions this crate
/// works at it settles in well under ten sweeps, and the cap only bounds
/// pathological inputs.
const MAX_JACOBI_SWEEPS: usize = 60;

/// Relative threshold below which a column pair counts as orthogonal and a
/// Jacobi rotation is skipped.
const JACOBI_ORTHO_TOL: f64 = 1.0e-15;

/// Thin singular value decomposition `m = U diag(sigma) V'`.
///
/// Computed by one-sided Jacobi rotations rather than `nalgebra`'s
/// Golub-Kahan implementation, because the latter can silently fail to
/// converge on some perfectly conditioned inputs — returning orthonormal
/// factors whose product is *not* the input, with singular values wrong in
/// the third digit. Every rank, kernel, image, and norm decision in this
/// crate flows through singular values, so correctness here is
/// non-negotiable; one-sided Jacobi is the most accurate SVD algorithm
/// known, trivially deterministic, and entirely adequate at small
/// dimensions. Every singular value decomposition in the crate goes
/// through here.
#[derive(Debug, Clone)]
pub(crate) struct ThinSvd {
    /// Left singular vectors, `nrows x k` with `k = min(nrows, ncols)`.
    /// Columns are orthonormal even past the rank (zero-singular-value
    /// columns are completed to an orthonormal basis).
    pub u: DMatrix<f64>,
    /// Singular values, sorted descending.
    pub sigma: DVector<f64>,
    /// Right singular vectors, transposed: `k x ncols`, orthonormal rows.
    pub v_t: DMatrix<f64>,
}

pub(crate) fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return ThinSvd {
            u: DMatrix::zeros(rows, 0),
            sigma: DVector::zeros(0),
            v_t: DMatrix::zeros(0, cols),
        };
    }
    let svd = if rows >= cols {
        let (u, sigma, v) = jacobi_svd_tall(m);
        ThinSvd {
            u,
            sigma,
            v_t: v.transpose(),
        }
    } else {
        // The one-sided sweep wants at least as many rows as columns;
        // transposing swaps the roles of U and V.
        let (ut, sigma, vt) = jacobi_svd_tall(&m.transpose());
        ThinSvd {
            u: vt,
            sigma,
            v_t: ut.transpose(),
        }
    };
    debug_assert!(
        {
            let k = svd.sigma.len();
            let rebuilt =
                &svd.u * DMatrix::from_fn(k, k, |i, j| if i == j { svd.sigma[i] } else { 0.0 })
                    * &svd.v_t;
            (rebuilt - m).norm() <= 1e-12 * (1.0 + m.norm())
        },
        "Jacobi SVD failed to reproduce its input"
    );
    svd
}

/// One-sided Jacobi on a tall (or square) matrix: returns `(U, sigma, V)`
/// with `a = U diag(sigma) V'`, `sigma` descending, `V` square.
///
/// Columns of the working copy are rotated until all pairs are orthogonal;
/// the rotations accumulate into `V`, the final column norms are the
/// singular values, and the normalized columns form `U`.
fn jacobi_svd_tall(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let rows = a.nrows();
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma.abs() <= JACOBI_ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let mut u = DMatrix::zeros(rows, n);
    let mut sigma = DVector::zeros(n);
    let mut v_sorted = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        v_sorted.column_mut(dst).copy_from(&v.column(src));
        if norms[src] > 0.0 {
            u.column_mut(dst)
                .copy_from(&(w.column(src) / norms[src]));
        }
    }
    // Columns whose singular value is exactly zero carry no direction of
    // their own; complete them to an orthonormal basis (the zeros sort
    // last) so both factors are always orthonormal. Each step picks the
    // standard basis vector with the largest component outside the span so
    // far, which is deterministic and never degenerate because the span
    // has fewer than `rows` columns.
    let mut filled = sigma.iter().filter(|&&s| s > 0.0).count();
    while filled < n {
        let head = u.columns(0, filled).into_owned();
        let mut best_residual: Option<DVector<f64>> = None;
        let mut best_norm = -1.0;
        for e in 0..rows {
            let mut cand = DVector::zeros(rows);
            cand[e] = 1.0;
            let resid = &cand - &head * (head.transpose() * &cand);
            let norm = resid.norm();
            if norm > best_norm {
                best_norm = norm;
                best_residual = Some(resid);
            }
        }
        let next = best_residual.expect("rows >= 1") / best_norm;
        u.column_mut(filled).copy_from(&next);
        filled += 1;
    }
    (u, sigma, v_sorted)
}

/// Largest singular value of `m` (zero for empty matrices).
pub(crate) fn sigma_max(m: &DMatrix<f64>) -> f64 {
    let sigma = thin_svd(m).sigma;
    if sigma.is_empty() {
        0.0
    } else {
        sigma[0]
    }
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_tol * sigma_max` treated as zero.
pub(crate) fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = thin_svd(m);
    let k = svd.sigma.len();
    if k == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let cutoff = rel_tol * svd.sigma[0];
    let inv = DMatrix::from_fn(k, k, |i, j| {
        if i == j && svd.sigma[i] > cutoff {
            1.0 / svd.sigma[i]
        } else {
            0.0
        }
    });
    svd.v_t.transpose() * inv * svd.u.transpose()
}

/// Numerical rank of `m`: the number of singular values exceeding
/// `rank_rel_tol * sigma_max`. The zero matrix (and any empty matrix) has
/// rank 0.
pub fn numeric_rank(m: &DMatrix<f64>, pol: &TolerancePolicy) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sigma = thin_svd(m).sigma;
    let smax = sigma[0];
    if smax <= 0.0 {
        return 0;
    }
    let cutoff = pol.rank_rel_tol * smax;
    sigma.iter().filter(|&&s| s > cutoff).count()
}

/// Orthonormal basis of the null space of `m`, as a subspace of
/// `R^{ncols}`. Columns are ordered by ascending singular value of `m`, so
/// column 0 is the direction in which `m` is numerically smallest.
///
/// The SVD of a wide matrix only exposes `nrows` right singular vectors, so
/// wide inputs are padded with zero rows to square before decomposition;
/// padding changes neither the singular values nor the right vectors.
pub fn null_space(m: &DMatrix<f64>, pol: &TolerancePolicy) -> SubspaceBasis {
    null_space_with_floor(m, 0.0, pol)
}

/// [`null_space`] with an external scale floor for the rank cutoff.
///
/// When `m` arises from a cancellation (say a projector residual of some
/// matrix `M`), its own largest singular value may be pure roundoff, and a
/// purely relative rank test would read the noise as full rank. Passing the
/// magnitude of the source data as `scale_floor` keeps the cutoff anchored
/// to the scale the cancellation came from.
pub(crate) fn null_space_with_floor(
    m: &DMatrix<f64>,
    scale_floor: f64,
    pol: &TolerancePolicy,
) -> SubspaceBasis {
    let ncols = m.ncols();
    if ncols == 0 {
        return SubspaceBasis::empty(0);
    }
    if m.nrows() == 0 {
        return SubspaceBasis::full(ncols);
    }
    let work = if m.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.view_mut((0, 0), (m.nrows(), ncols)).copy_from(m);
        padded
    } else {
        m.clone()
    };
    let svd = thin_svd(&work);
    let sigma = svd.sigma;
    let v_t = svd.v_t;
    debug_assert_eq!(v_t.nrows(), ncols);
    let smax = sigma[0];
    let cutoff = pol.rank_rel_tol * smax.max(scale_floor);
    let rank = if smax <= 0.0 {
        0
    } else {
        sigma.iter().filter(|&&s| s > cutoff).count()
    };
    let kdim = ncols - rank;
    let mut basis = DMatrix::zeros(ncols, kdim);
    for j in 0..kdim {
        // Singular values are sorted descending, so the smallest live at the
        // end of v_t; reverse so our column 0 has the smallest sigma.
        basis.column_mut(j).copy_from(&v_t.row(ncols - 1 - j).transpose());
    }
    SubspaceBasis {
        ambient_dim: ncols,
        basis,
    }
}

/// Orthonormal basis of the column space of `m`, as a subspace of
/// `R^{nrows}`.
pub fn image_basis(m: &DMatrix<f64>, pol: &TolerancePolicy) -> SubspaceBasis {
    let nrows = m.nrows();
    if nrows == 0 || m.ncols() == 0 {
        return SubspaceBasis::empty(nrows);
    }
    let svd = thin_svd(m);
    let sigma = svd.sigma;
    let u = svd.u;
    let smax = sigma[0];
    if smax <= 0.0 {
        return SubspaceBasis::empty(nrows);
    }
    let cutoff = pol.rank_rel_tol * smax;
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    SubspaceBasis {
        ambient_dim: nrows,
        basis: u.columns(0, rank).into_owned(),
    }
}

/// Orthonormal complement of a unit vector: an `n x (n-1)` matrix `U` with
/// orthonormal columns satisfying `U' v = 0`, built from a single Householder
/// reflector so the result is deterministic and exactly reproducible.
pub fn unitary_complement(
    v: &DVector<f64>,
    pol: &TolerancePolicy,
) -> Result<DMatrix<f64>, LinalgError> {
    let n = v.len();
    if n < 2 {
        return Err(LinalgError::AmbientTooSmall { dim: n });
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    if (norm - 1.0).abs() > pol.residual_tol {
        return Err(LinalgError::NonUnitVector { norm });
    }
    // Householder reflector H with H v = -alpha e1; its trailing n-1 columns
    // are an orthonormal basis of v's complement. The sign choice keeps the
    // reflector well conditioned for every v.
    let alpha = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = v.clone();
    w[0] += alpha;
    let beta = w.dot(&w);
    let mut u = DMatrix::zeros(n, n - 1);
    for j in 1..n {
        let mut col = DVector::zeros(n);
        col[j] = 1.0;
        let scale = 2.0 * w[j] / beta;
        col.axpy(-scale, &w, 1.0);
        u.column_mut(j - 1).copy_from(&col);
    }
    Ok(u)
}

/// A linear subspace of `R^n` represented by an orthonormal basis.
///
/// The zero subspace is an `n x 0` basis; the full space is the identity.
/// All set operations return orthonormal bases and decide dimensions through
/// the supplied [`TolerancePolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    ambient_dim: usize,
    basis: DMatrix<f64>,
}

impl SubspaceBasis {
    /// The zero subspace of `R^{ambient_dim}`.
    pub fn empty(ambient_dim: usize) -> Self {
        SubspaceBasis {
            ambient_dim,
            basis: DMatrix::zeros(ambient_dim, 0),
        }
    }

    /// The full space `R^{ambient_dim}`.
    pub fn full(ambient_dim: usize) -> Self {
        SubspaceBasis {
            ambient_dim,
            basis: DMatrix::identity(ambient_dim, ambient_dim),
        }
    }

    /// Wraps a matrix whose columns are already orthonormal, verifying
    /// `B'B = I` within `residual_tol`.
    pub fn from_orthonormal(
        basis: DMatrix<f64>,
        pol: &TolerancePolicy,
    ) -> Result<Self, LinalgError> {
        let d = basis.ncols();
        let gram = basis.transpose() * &basis;
        let residual = (&gram - DMatrix::identity(d, d)).norm();
        if residual > pol.residual_tol {
            return Err(LinalgError::NotOrthonormal {
                given: d,
                required: d,
            });
        }
        Ok(SubspaceBasis {
            ambient_dim: basis.nrows(),
            basis,
        })
    }

    /// Dimension of the surrounding space.
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Dimension of the subspace.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// The orthonormal basis matrix (`ambient_dim x dim`).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Orthogonal projector `B B'` onto the subspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Whether a nonzero vector lies in the subspace: the component of `v`
    /// orthogonal to the subspace must not exceed `angle_tol * |v|`.
    pub fn contains_vector(
        &self,
        v: &DVector<f64>,
        pol: &TolerancePolicy,
    ) -> Result<bool, LinalgError> {
        if v.len() != self.ambient_dim {
            return Err(LinalgError::AmbientMismatch {
                left: v.len(),
                right: self.ambient_dim,
            });
        }
        let norm = v.norm();
        if norm == 0.0 {
            return Err(LinalgError::ZeroVector);
        }
        if self.dim() == 0 {
            return Ok(false);
        }
        let coeffs = self.basis.transpose() * v;
        let residual = v - &self.basis * coeffs;
        Ok(residual.norm() <= pol.angle_tol * norm)
    }

    /// Whether `other` is contained in `self` (every basis vector of `other`
    /// passes the membership test).
    pub fn contains_subspace(&self, other: &SubspaceBasis, pol: &TolerancePolicy) -> bool {
        if other.ambient_dim != self.ambient_dim {
            return false;
        }
        (0..other.dim()).all(|j| {
            let col = other.basis.column(j).into_owned();
            self.contains_vector(&col, pol).unwrap_or(false)
        })
    }

    /// Whether two bases span the same subspace (mutual containment).
    pub fn is_same_subspace(&self, other: &SubspaceBasis, pol: &TolerancePolicy) -> bool {
        self.dim() == other.dim() && self.contains_subspace(other, pol)
    }

    /// Intersection of two subspaces of the same ambient space.
    ///
    /// A vector lies in both subspaces exactly when it can be written as
    /// `B1 x = B2 y`, so the intersection is the image under `B1` of the
    /// x-part of the null space of `[B1, -B2]`. That map is injective on the
    /// null space because both bases have full column rank.
    pub fn intersect(
        &self,
        other: &SubspaceBasis,
        pol: &TolerancePolicy,
    ) -> Result<SubspaceBasis, LinalgError> {
        if self.ambient_dim != other.ambient_dim {
            return Err(LinalgError::AmbientMismatch {
                left: self.ambient_dim,
                right: other.ambient_dim,
            });
        }
        let (d1, d2) = (self.dim(), other.dim());
        if d1 == 0 || d2 == 0 {
            return Ok(SubspaceBasis::empty(self.ambient_dim));
        }
        let mut stacked = DMatrix::zeros(self.ambient_dim, d1 + d2);
        stacked.view_mut((0, 0), (self.ambient_dim, d1)).copy_from(&self.basis);
        stacked
            .view_mut((0, d1), (self.ambient_dim, d2))
            .copy_from(&(-&other.basis));
        let kernel = null_space(&stacked, pol);
        if kernel.dim() == 0 {
            return Ok(SubspaceBasis::empty(self.ambient_dim));
        }
        let x_part = kernel.basis().rows(0, d1).into_owned();
        let witnesses = &self.basis * x_part;
        Ok(image_basis(&witnesses, pol))
    }

    /// Sum (span of the union) of two subspaces of the same ambient space.
    pub fn sum(
        &self,
        other: &SubspaceBasis,
        pol: &TolerancePolicy,
    ) -> Result<SubspaceBasis, LinalgError> {
        if self.ambient_dim != other.ambient_dim {
            return Err(LinalgError::AmbientMismatch {
                left: self.ambient_dim,
                right: other.ambient_dim,
            });
        }
        let (d1, d2) = (self.dim(), other.dim());
        if d1 == 0 {
            return Ok(other.clone());
        }
        if d2 == 0 {
            return Ok(self.clone());
        }
        let mut stacked = DMatrix::zeros(self.ambient_dim, d1 + d2);
        stacked.view_mut((0, 0), (self.ambient_dim, d1)).copy_from(&self.basis);
        stacked
            .view_mut((0, d1), (self.ambient_dim, d2))
            .copy_from(&other.basis);
        Ok(image_basis(&stacked, pol))
    }

    /// Preimage `{x : map x in self}` of the subspace under a linear map
    /// into its ambient space. The result lives in `R^{map.ncols()}`.
    pub fn preimage(
        &self,
        map: &DMatrix<f64>,
        pol: &TolerancePolicy,
    ) -> Result<SubspaceBasis, LinalgError> {
        if map.nrows() != self.ambient_dim {
            return Err(LinalgError::MapShape {
                rows: map.nrows(),
                ambient: self.ambient_dim,
            });
        }
        // map x lies in the subspace iff its component orthogonal to the
        // subspace vanishes, i.e. (I - BB') map x = 0. The residual can be
        // pure cancellation noise (e.g. a full subspace annihilates every
        // map), so the rank cutoff is floored at the scale of `map` itself.
        let complement_map = map - self.projector() * map;
        Ok(null_space_with_floor(&complement_map, map.norm(), pol))
    }
}
