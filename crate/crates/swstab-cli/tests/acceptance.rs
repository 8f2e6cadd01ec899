//! End-to-end acceptance suite: ten numbered criteria covering the
//! structural formulas, the design loop, the certificates, the negative
//! control, and byte-level reproducibility. Each test prints exactly one
//! PASS or FAIL line (visible under `--nocapture`, and on every failure).
//!
//! Tolerances are pinned here, next to the criteria they gate, so the
//! thresholds the suite enforces are not scattered through the library.

use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swstab::cea::{build_q, compute_p, factor_input_matrix};
use swstab::linalg::{null_space, TolerancePolicy};
use swstab::model::closed_loop;
use swstab::montecarlo::{
    random_system, run_experiment, ExperimentSpec, ExperimentSummary, MatrixDistribution,
};
use swstab::structural::{assignable_subspace, rho_via_indices, transversality_check};
use swstab::triangularize::{design, DesignConfig};
use swstab::verify::{construct_cqlf, simulate, verify_design, SwitchingSignal};

/// Per-iteration eigenvector assignment residual bound (criterion 4).
const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
/// Closed-loop eigenvalue multiset match bound (criterion 4).
const EIGENVALUE_MATCH_TOL: f64 = 1e-6;
/// Below-diagonal relative mass bound (criterion 5).
const TRIANGULARITY_TOL: f64 = 1e-8;
/// `T'T = I` defect bound (criterion 5).
const ORTHONORMALITY_TOL: f64 = 1e-8;
/// Lyapunov decrease is only required down to this floor (criterion 6).
const LYAPUNOV_FLOOR: f64 = 1e-250;
/// Wall-clock budget for the flagship ensemble (criterion 1).
const RUNTIME_BUDGET: Duration = Duration::from_secs(30);

fn pol() -> TolerancePolicy {
    TolerancePolicy::default()
}

/// Prints the criterion's one-line outcome and panics on failure so the
/// suite both reports and fails honestly.
fn report(number: usize, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("acceptance criterion {number:2} ({name}): PASS — {detail}"),
        Err(detail) => {
            println!("acceptance criterion {number:2} ({name}): FAIL — {detail}");
            panic!("acceptance criterion {number} ({name}) failed: {detail}");
        }
    }
}

fn flagship_summary(trials: usize, seed: u64) -> ExperimentSummary {
    let spec = ExperimentSpec {
        n: 6,
        m: vec![4, 5],
        trials,
        seed,
        distribution: MatrixDistribution::StandardNormal,
        config: DesignConfig::default(),
    };
    run_experiment(&spec, &pol()).expect("flagship spec is valid")
}

#[test]
fn criterion_01_flagship_ensemble() {
    let outcome = (|| {
        let start = Instant::now();
        let summary = flagship_summary(200, 42);
        let elapsed = start.elapsed();
        if summary.valid_draws != 200 {
            return Err(format!("only {}/200 draws were valid", summary.valid_draws));
        }
        let generic = summary
            .trial_rows
            .iter()
            .filter(|row| {
                row.rho.as_deref() == Some(&[2, 4])
                    && row.q1 == Some(0)
                    && row.transverse == Some(true)
            })
            .count();
        if generic < 198 {
            return Err(format!(
                "only {generic}/200 trials hit the generic profile rho=(2,4), q1=0, transverse"
            ));
        }
        let verdict_true: Vec<_> = summary
            .trial_rows
            .iter()
            .filter(|row| row.verdict == Some(true))
            .collect();
        let clean = verdict_true
            .iter()
            .filter(|row| {
                row.design_ok
                    && row.iterations.len() == 6
                    && row.iterations.iter().all(|it| it.p_ell > 0)
            })
            .count();
        if clean != verdict_true.len() {
            return Err(format!(
                "{clean}/{} verdict-true trials completed with all structural indices positive",
                verdict_true.len()
            ));
        }
        if !summary.theorem_violations.is_empty() || !summary.tolerance_marginal.is_empty() {
            return Err(format!(
                "{} theorem violations, {} tolerance-marginal failures",
                summary.theorem_violations.len(),
                summary.tolerance_marginal.len()
            ));
        }
        if elapsed >= RUNTIME_BUDGET {
            return Err(format!("ensemble took {elapsed:.2?}, budget {RUNTIME_BUDGET:?}"));
        }
        Ok(format!(
            "{generic}/200 generic, {}/{} verdict-true trials clean, 0 violations, {elapsed:.2?}",
            clean,
            verdict_true.len()
        ))
    })();
    report(1, "flagship ensemble", outcome);
}

#[test]
fn criterion_02_assignable_dimension_formulas_agree() {
    let outcome = (|| {
        let pol = pol();
        for trial in 0..500u64 {
            let n = 2 + (trial as usize % 5); // 2..=6
            let m = 1 + (trial as usize * 7) % n; // all valid input counts
            let sys = random_system(
                n,
                &[m],
                MatrixDistribution::StandardNormal,
                1_000 + trial,
                &pol,
            )
            .map_err(|e| format!("trial {trial}: draw failed: {e}"))?;
            let sub = sys.subsystem(0);
            let direct = assignable_subspace(sub.a(), sub.b(), &pol).dim();
            // Internally cross-checks the index-count and rank formulas.
            let via_indices = rho_via_indices(sub.a(), sub.b(), &pol)
                .map_err(|e| format!("trial {trial} (n={n}, m={m}): {e}"))?;
            if direct != via_indices {
                return Err(format!(
                    "trial {trial} (n={n}, m={m}): subspace dimension {direct} != index count {via_indices}"
                ));
            }
        }
        Ok("500/500 controllable pairs agree across all three formulas".into())
    })();
    report(2, "assignable-subspace dimension formulas", outcome);
}

#[test]
fn criterion_03_kernel_dimension_lower_bound() {
    let outcome = (|| {
        let pol = pol();
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        // Profiles with a strictly positive structural index.
        let profiles: [(usize, &[usize]); 8] = [
            (2, &[2, 2]),
            (3, &[2, 3]),
            (4, &[3, 3]),
            (5, &[4, 4]),
            (6, &[4, 5]),
            (4, &[3, 3, 4]),
            (3, &[2, 2, 3]),
            (5, &[3, 5, 4]),
        ];
        for trial in 0..200usize {
            let (n, m) = profiles[trial % profiles.len()];
            let sys = random_system(
                n,
                m,
                MatrixDistribution::StandardNormal,
                2_000 + trial as u64,
                &pol,
            )
            .map_err(|e| format!("trial {trial}: draw failed: {e}"))?;
            let lambda: Vec<f64> = (0..m.len()).map(|_| rng.random_range(-0.9..0.9)).collect();
            let a_list: Vec<DMatrix<f64>> =
                sys.iter().map(|sub| sub.a().clone()).collect();
            let factors: Vec<_> = sys
                .iter()
                .map(|sub| factor_input_matrix(sub.b(), &pol))
                .collect();
            let ranks: Vec<usize> = factors.iter().map(|f| f.rank).collect();
            let p = compute_p(n, &ranks);
            if p <= 0 {
                return Err(format!("trial {trial}: profile lost its positive index (p={p})"));
            }
            let b_list: Vec<DMatrix<f64>> = factors.into_iter().map(|f| f.b).collect();
            let q = build_q(&a_list, &b_list, &lambda);
            let kernel_dim = null_space(&q, &pol).dim();
            if (kernel_dim as i64) < p {
                return Err(format!(
                    "trial {trial} (n={n}, m={m:?}): kernel dimension {kernel_dim} < structural index {p}"
                ));
            }
        }
        Ok("200/200 kernels at least as large as the structural index".into())
    })();
    report(3, "kernel dimension lower bound", outcome);
}

/// Successful designs over a mixed batch of profiles, with their systems.
fn design_batch(
    count: usize,
    seed_base: u64,
) -> Vec<(swstab::model::SwitchedSystem, swstab::triangularize::DesignResult)> {
    let pol = pol();
    let mut batch = Vec::new();
    for trial in 0..count as u64 {
        let sys = random_system(
            6,
            &[4, 5],
            MatrixDistribution::StandardNormal,
            seed_base + trial,
            &pol,
        )
        .expect("flagship draws are valid");
        let result = design(&sys, &DesignConfig::default(), &pol).expect("flagship designs succeed");
        batch.push((sys, result));
    }
    batch
}

#[test]
fn criterion_04_eigen_assignment_soundness() {
    let outcome = (|| {
        let pol = pol();
        let batch = design_batch(50, 4_000);
        let mut worst_residual: f64 = 0.0;
        let mut worst_match: f64 = 0.0;
        for (trial, (sys, result)) in batch.iter().enumerate() {
            for rec in &result.records {
                for &r in &rec.residuals {
                    worst_residual = worst_residual.max(r);
                    if r > EIGEN_RESIDUAL_TOL {
                        return Err(format!(
                            "trial {trial}, iteration {}: assignment residual {r:e}",
                            rec.ell
                        ));
                    }
                }
            }
            let report = verify_design(sys, &result.design, &pol).map_err(|e| e.to_string())?;
            worst_match = worst_match.max(report.eigenvalue_match_error);
            if report.eigenvalue_match_error > EIGENVALUE_MATCH_TOL {
                return Err(format!(
                    "trial {trial}: eigenvalue multiset error {:e}",
                    report.eigenvalue_match_error
                ));
            }
        }
        Ok(format!(
            "50/50 designs: worst residual {worst_residual:.2e}, worst multiset error {worst_match:.2e}"
        ))
    })();
    report(4, "eigen-assignment soundness", outcome);
}

#[test]
fn criterion_05_triangularisation_witness() {
    let outcome = (|| {
        let pol = pol();
        let batch = design_batch(50, 5_000);
        let mut worst_ortho: f64 = 0.0;
        let mut worst_mass: f64 = 0.0;
        for (trial, (sys, result)) in batch.iter().enumerate() {
            let t = &result.design.transformation;
            let ortho = (t.transpose() * t - DMatrix::<f64>::identity(6, 6)).norm();
            worst_ortho = worst_ortho.max(ortho);
            if ortho > ORTHONORMALITY_TOL {
                return Err(format!("trial {trial}: T'T - I defect {ortho:e}"));
            }
            let report = verify_design(sys, &result.design, &pol).map_err(|e| e.to_string())?;
            worst_mass = worst_mass.max(report.triangularity_residual);
            if report.triangularity_residual > TRIANGULARITY_TOL {
                return Err(format!(
                    "trial {trial}: below-diagonal relative mass {:e}",
                    report.triangularity_residual
                ));
            }
        }
        Ok(format!(
            "50/50 designs: worst T'T defect {worst_ortho:.2e}, worst below-diagonal mass {worst_mass:.2e}"
        ))
    })();
    report(5, "triangularisation witness", outcome);
}

#[test]
fn criterion_06_cqlf_and_lyapunov_decrease() {
    let outcome = (|| {
        let pol = pol();
        let batch = design_batch(30, 6_000);
        let mut worst_margin = f64::INFINITY;
        for (trial, (sys, result)) in batch.iter().enumerate() {
            let loops = closed_loop(sys, &result.design).map_err(|e| e.to_string())?;
            let cert = construct_cqlf(&loops, &result.design.transformation, &pol)
                .map_err(|e| format!("trial {trial}: no certificate: {e}"))?;
            worst_margin = worst_margin.min(cert.margin);
            if cert.margin <= 0.0 {
                return Err(format!("trial {trial}: non-positive margin {:e}", cert.margin));
            }
            let signal = SwitchingSignal::uniform_random(sys.num_subsystems(), 1_000, trial as u64);
            let x0 = DVector::from_element(6, 1.0);
            let sim =
                simulate(sys, &result.design, &signal, &x0, 1_000, &pol).map_err(|e| e.to_string())?;
            let v = sim
                .lyapunov
                .ok_or_else(|| format!("trial {trial}: simulation carried no Lyapunov values"))?;
            for k in 0..v.len() - 1 {
                if v[k] > LYAPUNOV_FLOOR && v[k + 1] >= v[k] {
                    return Err(format!(
                        "trial {trial}, step {k}: V did not decrease ({:e} -> {:e})",
                        v[k],
                        v[k + 1]
                    ));
                }
            }
        }
        Ok(format!(
            "30/30 designs certified (worst margin {worst_margin:.3e}); V strictly decreasing over 1000 random-switching steps"
        ))
    })();
    report(6, "CQLF construction and Lyapunov decrease", outcome);
}

#[test]
fn criterion_07_structural_index_trace_law() {
    let outcome = (|| {
        // Traces from three profiles: the flagship, a verdict-false profile
        // whose designs still succeed, and the full-input square case.
        let mut specs = vec![
            ExperimentSpec {
                n: 6,
                m: vec![4, 5],
                trials: 100,
                seed: 7_000,
                distribution: MatrixDistribution::StandardNormal,
                config: DesignConfig::default(),
            },
            ExperimentSpec {
                n: 4,
                m: vec![2, 3],
                trials: 100,
                seed: 7_100,
                distribution: MatrixDistribution::StandardNormal,
                config: DesignConfig::default(),
            },
            ExperimentSpec {
                n: 3,
                m: vec![3, 3, 3],
                trials: 50,
                seed: 7_200,
                distribution: MatrixDistribution::StandardNormal,
                config: DesignConfig::default(),
            },
        ];
        let mut traces = 0usize;
        let mut drops = 0usize;
        for spec in specs.drain(..) {
            let summary = run_experiment(&spec, &pol()).expect("specs are valid");
            for row in &summary.trial_rows {
                if row.iterations.is_empty() {
                    continue;
                }
                traces += 1;
                let its = &row.iterations;
                for w in its.windows(2) {
                    let (cur, next) = (&w[0], &w[1]);
                    if next.p_ell < cur.p_ell - 1 {
                        return Err(format!(
                            "trial {}: index dropped from {} to {} across iterations {}->{}",
                            row.trial, cur.p_ell, next.p_ell, cur.ell, next.ell
                        ));
                    }
                    let dropped_by_one = next.p_ell == cur.p_ell - 1;
                    if dropped_by_one != cur.v1_in_all_images {
                        return Err(format!(
                            "trial {}, iteration {}: drop-by-one is {dropped_by_one} but the \
                             eigenvector-in-all-images flag is {}",
                            row.trial, cur.ell, cur.v1_in_all_images
                        ));
                    }
                    if dropped_by_one {
                        drops += 1;
                    }
                    // When some image misses the eigenvector, the next
                    // index must still be positive.
                    if !cur.v1_in_all_images && next.p_ell <= 0 {
                        return Err(format!(
                            "trial {}, iteration {}: index {} not positive after a non-drop step",
                            row.trial,
                            next.ell,
                            next.p_ell
                        ));
                    }
                }
                // Positivity window: a positive index at iteration ell
                // keeps the index positive up to iteration ell + p_ell - 1.
                for (idx, it) in its.iter().enumerate() {
                    if it.p_ell <= 0 {
                        continue;
                    }
                    let window_end = (idx + it.p_ell as usize - 1).min(its.len() - 1);
                    for later in &its[idx..=window_end] {
                        if later.p_ell <= 0 {
                            return Err(format!(
                                "trial {}: index {} at iteration {} inside the positivity window \
                                 opened at iteration {}",
                                row.trial, later.p_ell, later.ell, it.ell
                            ));
                        }
                    }
                }
            }
        }
        Ok(format!(
            "{traces} traces obey the drop law and positivity window ({drops} drop-by-one steps observed)"
        ))
    })();
    report(7, "structural index trace law", outcome);
}

#[test]
fn criterion_08_negative_control() {
    let outcome = (|| {
        let spec = ExperimentSpec {
            n: 3,
            m: vec![1, 1],
            trials: 100,
            seed: 8_000,
            distribution: MatrixDistribution::StandardNormal,
            config: DesignConfig::default(),
        };
        let summary = run_experiment(&spec, &pol()).expect("spec is valid");
        if summary.precheck_true != 0 {
            return Err(format!(
                "{} trials passed the precheck on a profile that cannot satisfy it",
                summary.precheck_true
            ));
        }
        let failures = summary.expected_failures.len();
        if failures < 95 {
            return Err(format!("only {failures}/100 designs failed"));
        }
        for trace in &summary.expected_failures {
            if trace.iteration != 1 || !trace.message.contains("kernel empty at iteration 1") {
                return Err(format!(
                    "trial {} failed at iteration {} with message {:?}",
                    trace.trial, trace.iteration, trace.message
                ));
            }
        }
        Ok(format!(
            "0/100 precheck passes, {failures}/100 kernel-empty failures, all naming iteration 1"
        ))
    })();
    report(8, "negative control", outcome);
}

#[test]
fn criterion_09_transversality_genericity() {
    let outcome = (|| {
        let pol = pol();
        // Dimension profiles with a nonnegative structural surplus.
        let profiles: [(usize, &[usize]); 10] = [
            (4, &[3, 3]),
            (5, &[4, 4]),
            (6, &[5, 4]),
            (3, &[2, 2]),
            (4, &[2, 2]),
            (6, &[3, 3]),
            (5, &[3, 2]),
            (2, &[1, 1]),
            (4, &[3, 3, 3]),
            (3, &[2, 2, 2]),
        ];
        let mut certified = 0usize;
        for trial in 0..500usize {
            let (n, dims) = profiles[trial % profiles.len()];
            // The input matrices of a random draw are exactly random
            // full-rank bases of the requested dimensions.
            let sys = random_system(
                n,
                dims,
                MatrixDistribution::StandardNormal,
                9_000 + trial as u64,
                &pol,
            )
            .map_err(|e| format!("trial {trial}: draw failed: {e}"))?;
            let subspaces: Vec<_> = sys
                .iter()
                .map(|sub| swstab::linalg::image_basis(sub.b(), &pol))
                .collect();
            let (verdict, table) =
                transversality_check(&subspaces, &pol).map_err(|e| e.to_string())?;
            if !verdict {
                continue;
            }
            certified += 1;
            for entry in &table {
                if entry.intersection_dim != entry.expected_intersection_dim
                    || entry.sum_dim != entry.expected_sum_dim
                {
                    return Err(format!(
                        "trial {trial}, subset {:?}: dims ({}, {}) differ from generic ({}, {})",
                        entry.subset,
                        entry.intersection_dim,
                        entry.sum_dim,
                        entry.expected_intersection_dim,
                        entry.expected_sum_dim
                    ));
                }
                if entry.subset.len() == 2 {
                    let d_sum: usize = entry
                        .subset
                        .iter()
                        .map(|&i| subspaces[i - 1].dim())
                        .sum();
                    if entry.intersection_dim + entry.sum_dim != d_sum {
                        return Err(format!(
                            "trial {trial}, subset {:?}: modular identity violated",
                            entry.subset
                        ));
                    }
                }
            }
        }
        if certified < 495 {
            return Err(format!("only {certified}/500 tuples certified transverse"));
        }
        Ok(format!(
            "{certified}/500 tuples transverse; generic-dimension and modular identities hold on all"
        ))
    })();
    report(9, "transversality genericity", outcome);
}

#[test]
fn criterion_10_byte_identical_reruns() {
    let outcome = (|| {
        let bin = env!("CARGO_BIN_EXE_swstab");
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = |name: &str| dir.path().join(name).display().to_string();
        let run = |args: &[&str]| -> Result<std::process::Output, String> {
            let out = Command::new(bin)
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!(
                    "{args:?} exited with {:?}: {}",
                    out.status.code(),
                    String::from_utf8_lossy(&out.stderr)
                ));
            }
            Ok(out)
        };
        let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| e.to_string());

        run(&["random", "--n", "6", "--m", "4,5", "--seed", "11", "--out", &path("sys.json")])?;
        let sys_bytes = read("sys.json")?;

        let design_args = [
            "design",
            &path("sys.json"),
            "--out",
            &path("d.json"),
            "--lambda",
            "0.5,0.4,0.3,0.2,0.1,0.05",
            "--seed",
            "9",
            "--diagnostic-subspaces",
        ];
        run(&design_args)?;
        let (d1, t1) = (read("d.json")?, read("d.trace.json")?);
        run(&design_args)?;
        if read("d.json")? != d1 || read("d.trace.json")? != t1 {
            return Err("design re-run changed its outputs".into());
        }

        let sim_args = [
            "simulate",
            &path("sys.json"),
            &path("d.json"),
            "--steps",
            "200",
            "--signal",
            "uniform",
            "--seed",
            "3",
            "--out",
            &path("traj.csv"),
        ];
        run(&sim_args)?;
        let traj1 = read("traj.csv")?;
        run(&sim_args)?;
        if read("traj.csv")? != traj1 {
            return Err("simulate re-run changed its output".into());
        }

        let mc_args = [
            "montecarlo",
            "--n",
            "4",
            "--m",
            "2,3",
            "--trials",
            "10",
            "--seed",
            "1",
            "--out",
            &path("mc.json"),
            "--trials-csv",
            &path("mc.csv"),
        ];
        run(&mc_args)?;
        let (mc1, csv1) = (read("mc.json")?, read("mc.csv")?);
        run(&mc_args)?;
        if read("mc.json")? != mc1 || read("mc.csv")? != csv1 {
            return Err("montecarlo re-run changed its outputs".into());
        }

        let pre1 = run(&["precheck", &path("sys.json"), "--format", "json"])?;
        let pre2 = run(&["precheck", &path("sys.json"), "--format", "json"])?;
        if pre1.stdout != pre2.stdout {
            return Err("precheck re-run changed its JSON output".into());
        }

        if read("sys.json")? != sys_bytes {
            return Err("an input file was mutated".into());
        }
        Ok("design, simulate, montecarlo, and precheck re-runs are byte-identical; inputs untouched".into())
    })();
    report(10, "byte-identical re-runs", outcome);
}
