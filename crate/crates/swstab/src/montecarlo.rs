//! Randomized experiments over ensembles of switched systems: draw a
//! system, run the a-priori structural check, attempt the design, verify
//! the result, and aggregate everything into a reproducible summary.
//!
//! The headline question an experiment answers is empirical: how often do
//! random systems of a given dimension profile satisfy the structural
//! sufficient condition, and does the design loop ever fail on a system
//! whose verdict said it must succeed? A verdict-true design failure would
//! contradict the theory backing the verdict, so such trials are recorded
//! individually as theorem-violation candidates — except when the draw sits
//! numerically on a rank boundary, in which case the trial lands in a
//! separate tolerance-marginal bucket with the offending singular-value
//! ratio attached.
//!
//! Determinism is load-bearing: per-trial seeds derive from the experiment
//! seed and the trial index alone, so trial order cannot leak into results
//! and identical specs produce byte-identical summaries.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, TolerancePolicy};
use crate::model::{self, SwitchedSystem};
use crate::seeds;
use crate::structural::genericity_precheck;
use crate::triangularize::{design, DesignConfig, DesignError};
use crate::verify::verify_design;

/// How many times one subsystem may be redrawn before the draw is declared
/// failed. Controllability and full column rank are generic, so hitting
/// this bound signals a dimension bug, not bad luck.
const MAX_REDRAWS: usize = 100;

/// Half-width, in decades, of the window around the rank cutoff inside
/// which a singular-value ratio counts as tolerance-marginal.
const MARGINAL_DECADES: f64 = 1.0;

/// Entry distribution for random system draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixDistribution {
    /// Independent standard-normal entries.
    StandardNormal,
    /// Independent entries uniform on `(-1, 1)`.
    Uniform,
}

/// Errors from experiment setup and system draws.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {detail}")]
    InvalidSpec { detail: String },
    #[error(
        "subsystem {subsystem} failed validation after {attempts} redraws; \
         controllability is generic, so the dimension profile is suspect"
    )]
    ExhaustedRedraws { subsystem: usize, attempts: usize },
}

/// A complete description of one experiment: the dimension profile, the
/// trial count, the seed, the entry distribution, and the design
/// configuration applied to every trial.
///
/// The number of subsystems is the length of `m`. The `seed` field of
/// `config` is superseded per trial: each trial's probe seed derives from
/// the experiment seed and the trial index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// State dimension.
    pub n: usize,
    /// Input dimensions, one per subsystem.
    pub m: Vec<usize>,
    /// Number of systems to draw.
    pub trials: usize,
    /// Master seed; everything downstream derives from it.
    pub seed: u64,
    /// Entry distribution for the draws.
    pub distribution: MatrixDistribution,
    /// Design configuration applied to every trial.
    #[serde(default)]
    pub config: DesignConfig,
}

impl ExperimentSpec {
    /// Validates the dimension profile and trial count.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n == 0 {
            return Err(ExperimentError::InvalidSpec {
                detail: "state dimension must be at least 1".into(),
            });
        }
        if self.m.is_empty() {
            return Err(ExperimentError::InvalidSpec {
                detail: "at least one subsystem is required".into(),
            });
        }
        if let Some(i) = self.m.iter().position(|&m| m == 0) {
            return Err(ExperimentError::InvalidSpec {
                detail: format!("subsystem {} must have at least one input", i + 1),
            });
        }
        if let Some(i) = self.m.iter().position(|&m| m > self.n) {
            return Err(ExperimentError::InvalidSpec {
                detail: format!(
                    "subsystem {} has {} inputs but the state dimension is only {}",
                    i + 1,
                    self.m[i],
                    self.n
                ),
            });
        }
        if self.trials == 0 {
            return Err(ExperimentError::InvalidSpec {
                detail: "at least one trial is required".into(),
            });
        }
        Ok(())
    }
}

/// One iteration of one trial, reduced to the quantities the structural
/// trace laws speak about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    /// Iteration number, 1-based.
    pub ell: usize,
    /// Reduced dimension at this iteration.
    pub n_ell: usize,
    /// Structural index at this iteration.
    pub p_ell: i64,
    /// Numerical kernel dimension of the assignment matrix.
    pub kernel_dim: usize,
    /// Whether the chosen eigenvector lay in every reduced input image.
    pub v1_in_all_images: bool,
    /// Whether the eigenvalues came from random probing.
    pub probed: bool,
}

/// Per-trial outcome row: what was drawn, what the precheck said, and how
/// far the pipeline got.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    /// Trial index, 0-based.
    pub trial: usize,
    /// Whether the draw produced a valid system.
    pub valid: bool,
    /// Precheck verdict (`None` when the draw failed).
    pub verdict: Option<bool>,
    /// Transversality flag from the precheck.
    pub transverse: Option<bool>,
    /// Structural surplus `q_1` from the precheck.
    pub q1: Option<i64>,
    /// Assignable-subspace dimensions from the precheck.
    pub rho: Option<Vec<usize>>,
    /// Whether the design loop completed.
    pub design_ok: bool,
    /// Whether any iteration used probed eigenvalues.
    pub probed: bool,
    /// Verification outcome (`None` unless the design completed).
    pub verify_pass: Option<bool>,
    /// Iteration records, one per completed (or attempted) iteration.
    pub iterations: Vec<IterationRow>,
}

/// A design failure worth reporting individually: the trial, where the
/// loop died, and the message it died with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTrace {
    /// Trial index, 0-based.
    pub trial: usize,
    /// Iteration the design loop failed at, 1-based.
    pub iteration: usize,
    /// The failure message.
    pub message: String,
    /// For tolerance-marginal failures: the singular-value ratio found
    /// within a decade of the rank cutoff.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_gap: Option<f64>,
}

/// Aggregated outcome of an experiment.
///
/// Counts nest downward in the no-probe case — verification passes are a
/// subset of design successes, which (modulo the probe fallback, counted
/// separately) are a subset of verdict-true trials, which are a subset of
/// valid draws. Histograms map observed values to occurrence counts; the
/// per-iteration histograms are indexed by iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// The spec that produced this summary.
    pub spec: ExperimentSpec,
    /// Draws that produced a valid system.
    pub valid_draws: usize,
    /// Draws that exhausted their redraw budget.
    pub draw_failures: usize,
    /// Trials whose precheck verdict was true.
    pub precheck_true: usize,
    /// Trials whose design loop completed.
    pub design_successes: usize,
    /// Completed designs that used the probe fallback at some iteration.
    pub probed_designs: usize,
    /// Completed designs that also passed verification.
    pub verification_passes: usize,
    /// Per-subsystem histograms of the assignable-subspace dimension.
    pub rho_histograms: Vec<BTreeMap<usize, usize>>,
    /// Histogram of the structural surplus `q_1`.
    pub q1_histogram: BTreeMap<i64, usize>,
    /// Per-iteration histograms of the structural index `p_ell`,
    /// indexed by iteration minus one.
    pub p_histograms: Vec<BTreeMap<i64, usize>>,
    /// Verdict-true design failures with no numerical excuse: candidates
    /// for genuine theorem violations. Expected to stay empty.
    pub theorem_violations: Vec<FailureTrace>,
    /// Verdict-true design failures on draws whose rank decisions sat
    /// within a decade of the cutoff.
    pub tolerance_marginal: Vec<FailureTrace>,
    /// Design failures on verdict-false systems (expected for profiles
    /// that violate the structural condition).
    pub expected_failures: Vec<FailureTrace>,
    /// One row per trial, in trial order.
    pub trial_rows: Vec<TrialRow>,
}

impl ExperimentSummary {
    /// Per-trial rows as CSV. Columns: trial, valid, verdict, transverse,
    /// q1, rho (values joined by `|`), design_ok, probed, verify_pass,
    /// fail_iteration, p_trace (per-iteration `p_ell` joined by `|`).
    /// Optional fields of trials that never reached the stage are empty.
    pub fn trial_csv(&self) -> String {
        let mut out = String::from(
            "trial,valid,verdict,transverse,q1,rho,design_ok,probed,verify_pass,fail_iteration,p_trace\n",
        );
        let fail_iter: BTreeMap<usize, usize> = self
            .theorem_violations
            .iter()
            .chain(&self.tolerance_marginal)
            .chain(&self.expected_failures)
            .map(|f| (f.trial, f.iteration))
            .collect();
        for row in &self.trial_rows {
            let opt_bool = |b: Option<bool>| b.map(|v| v.to_string()).unwrap_or_default();
            let rho = row
                .rho
                .as_ref()
                .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join("|"))
                .unwrap_or_default();
            let p_trace = row
                .iterations
                .iter()
                .map(|it| it.p_ell.to_string())
                .collect::<Vec<_>>()
                .join("|");
            let fail = fail_iter
                .get(&row.trial)
                .map(usize::to_string)
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                row.trial,
                row.valid,
                opt_bool(row.verdict),
                opt_bool(row.transverse),
                row.q1.map(|v| v.to_string()).unwrap_or_default(),
                rho,
                row.design_ok,
                row.probed,
                opt_bool(row.verify_pass),
                fail,
                p_trace,
            ));
        }
        out
    }
}

/// Draws one switched system with independent entries from the given
/// distribution, redrawing any subsystem that fails full column rank or
/// controllability (both failures have measure zero, so redraws are a
/// numerical safety valve, not a statistical correction).
///
/// Deterministic: the same `(n, m, distribution, seed)` produce the same
/// system, entry for entry.
pub fn random_system(
    n: usize,
    m: &[usize],
    distribution: MatrixDistribution,
    seed: u64,
    pol: &TolerancePolicy,
) -> Result<SwitchedSystem, ExperimentError> {
    if n == 0 || m.is_empty() || m.iter().any(|&mi| mi == 0) {
        return Err(ExperimentError::InvalidSpec {
            detail: "dimensions must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| match distribution {
            MatrixDistribution::StandardNormal => rng.sample(rand_distr::StandardNormal),
            MatrixDistribution::Uniform => rng.random_range(-1.0..1.0),
        })
    };
    let mut pairs = Vec::with_capacity(m.len());
    for (i, &mi) in m.iter().enumerate() {
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let a = draw(&mut rng, n, n);
            let b = draw(&mut rng, n, mi);
            if linalg::numeric_rank(&b, pol) == mi && model::is_controllable(&a, &b, pol) {
                accepted = Some((a, b));
                break;
            }
        }
        match accepted {
            Some(pair) => pairs.push(pair),
            None => {
                return Err(ExperimentError::ExhaustedRedraws {
                    subsystem: i + 1,
                    attempts: MAX_REDRAWS,
                })
            }
        }
    }
    SwitchedSystem::new(pairs, pol).map_err(|e| ExperimentError::InvalidSpec {
        detail: format!("draw passed per-subsystem checks but failed validation: {e}"),
    })
}

/// Scans the rank decisions behind the precheck — the input matrices and
/// the stacked `[B, AB]` blocks — for a singular value within
/// [`MARGINAL_DECADES`] of the rank cutoff. Returns the ratio closest to
/// the cutoff in log distance, if any: a verdict computed on such a draw
/// is a coin flip, not a counterexample.
fn marginal_sigma_gap(sys: &SwitchedSystem, pol: &TolerancePolicy) -> Option<f64> {
    let log_tol = pol.rank_rel_tol.log10();
    let mut best: Option<(f64, f64)> = None; // (log distance, ratio)
    for sub in sys.iter() {
        let b = sub.b();
        let a = sub.a();
        let n = b.nrows();
        let m = b.ncols();
        let mut stacked = DMatrix::zeros(n, 2 * m);
        stacked.view_mut((0, 0), (n, m)).copy_from(b);
        stacked.view_mut((0, m), (n, m)).copy_from(&(a * b));
        for matrix in [b.clone(), stacked] {
            let sigma = linalg::thin_svd(&matrix).sigma;
            if sigma.is_empty() || sigma[0] <= 0.0 {
                continue;
            }
            for &s in sigma.iter().skip(1) {
                if s <= 0.0 {
                    continue;
                }
                let ratio = s / sigma[0];
                let dist = (ratio.log10() - log_tol).abs();
                if dist <= MARGINAL_DECADES && best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, ratio));
                }
            }
        }
    }
    best.map(|(_, ratio)| ratio)
}

/// Runs the full pipeline over `spec.trials` random systems and aggregates
/// the outcome. Individual trial failures are data, not errors; only an
/// invalid spec fails.
///
/// Each trial derives two private seeds from `(spec.seed, trial)` — one
/// for the system draw, one for the design's probe stream — so results are
/// independent of execution order and reproducible from the spec alone.
pub fn run_experiment(
    spec: &ExperimentSpec,
    pol: &TolerancePolicy,
) -> Result<ExperimentSummary, ExperimentError> {
    spec.validate()?;
    let n_subsystems = spec.m.len();
    let mut summary = ExperimentSummary {
        spec: spec.clone(),
        valid_draws: 0,
        draw_failures: 0,
        precheck_true: 0,
        design_successes: 0,
        probed_designs: 0,
        verification_passes: 0,
        rho_histograms: vec![BTreeMap::new(); n_subsystems],
        q1_histogram: BTreeMap::new(),
        p_histograms: vec![BTreeMap::new(); spec.n],
        theorem_violations: Vec::new(),
        tolerance_marginal: Vec::new(),
        expected_failures: Vec::new(),
        trial_rows: Vec::with_capacity(spec.trials),
    };
    for trial in 0..spec.trials {
        let trial_seed = seeds::derive_seed(spec.seed, trial as u64);
        let system_seed = seeds::derive_seed(trial_seed, 0);
        let design_seed = seeds::derive_seed(trial_seed, 1);
        let mut row = TrialRow {
            trial,
            valid: false,
            verdict: None,
            transverse: None,
            q1: None,
            rho: None,
            design_ok: false,
            probed: false,
            verify_pass: None,
            iterations: Vec::new(),
        };
        let sys = match random_system(spec.n, &spec.m, spec.distribution, system_seed, pol) {
            Ok(sys) => sys,
            Err(_) => {
                summary.draw_failures += 1;
                summary.trial_rows.push(row);
                continue;
            }
        };
        summary.valid_draws += 1;
        row.valid = true;

        let report = genericity_precheck(&sys, pol);
        row.verdict = Some(report.verdict);
        row.transverse = Some(report.transverse);
        row.q1 = Some(report.q1);
        row.rho = Some(report.rho.clone());
        if report.verdict {
            summary.precheck_true += 1;
        }
        for (hist, &r) in summary.rho_histograms.iter_mut().zip(&report.rho) {
            *hist.entry(r).or_insert(0) += 1;
        }
        *summary.q1_histogram.entry(report.q1).or_insert(0) += 1;

        let cfg = DesignConfig {
            seed: design_seed,
            ..spec.config.clone()
        };
        let (records, failure) = match design(&sys, &cfg, pol) {
            Ok(out) => {
                summary.design_successes += 1;
                row.design_ok = true;
                row.probed = out.records.iter().any(|r| r.probed);
                if row.probed {
                    summary.probed_designs += 1;
                }
                let verification = verify_design(&sys, &out.design, pol)
                    .map(|rep| rep.pass)
                    .unwrap_or(false);
                row.verify_pass = Some(verification);
                if verification {
                    summary.verification_passes += 1;
                }
                (out.records, None)
            }
            Err(err) => {
                let message = err.to_string();
                match err {
                    DesignError::Failed {
                        iteration, records, ..
                    } => (records, Some((iteration, message))),
                    _ => (Vec::new(), Some((0, message))),
                }
            }
        };
        for rec in &records {
            row.iterations.push(IterationRow {
                ell: rec.ell,
                n_ell: rec.n_ell,
                p_ell: rec.p_ell,
                kernel_dim: rec.kernel_dim,
                v1_in_all_images: rec.v1_in_all_images,
                probed: rec.probed,
            });
            if rec.ell >= 1 && rec.ell <= summary.p_histograms.len() {
                *summary.p_histograms[rec.ell - 1]
                    .entry(rec.p_ell)
                    .or_insert(0) += 1;
            }
        }
        if let Some((iteration, message)) = failure {
            let trace = FailureTrace {
                trial,
                iteration,
                message,
                sigma_gap: None,
            };
            if report.verdict {
                match marginal_sigma_gap(&sys, pol) {
                    Some(gap) => summary.tolerance_marginal.push(FailureTrace {
                        sigma_gap: Some(gap),
                        ..trace
                    }),
                    None => summary.theorem_violations.push(trace),
                }
            } else {
                summary.expected_failures.push(trace);
            }
        } else if report.verdict && records.iter().any(|r| r.p_ell <= 0) {
            // The verdict promises a strictly positive structural index at
            // every iteration; a run that completed anyway (the index is
            // only a lower bound on the kernel) still contradicts it.
            let iteration = records
                .iter()
                .find(|r| r.p_ell <= 0)
                .map(|r| r.ell)
                .unwrap_or(0);
            let trace = FailureTrace {
                trial,
                iteration,
                message: format!(
                    "design succeeded but recorded a non-positive structural index at iteration {iteration}"
                ),
                sigma_gap: None,
            };
            match marginal_sigma_gap(&sys, pol) {
                Some(gap) => summary.tolerance_marginal.push(FailureTrace {
                    sigma_gap: Some(gap),
                    ..trace
                }),
                None => summary.theorem_violations.push(trace),
            }
        }
        summary.trial_rows.push(row);
    }
    Ok(summary)
}
