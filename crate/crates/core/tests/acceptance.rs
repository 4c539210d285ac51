//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fail.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dagconv::graph::{builtin, enumerate_space_nb201, ArchGraph, Nb201Cell};
use dagconv::metrics::{filter_keep, graph_metrics, space_extremes, FilterConfig, TopoMetrics};
use dagconv::nngp::{exact_lambda, full_kernel, min_eigenvalue, pairwise_bound, relu_h};
use dagconv::sim::{
    build_net, compare_dags, empirical_output_gram, Dataset, Loss, SimConfig, DEFAULT_THRESHOLD,
};
use dagconv::stats::multi_correlation_columns;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("{what} took {elapsed:?}, limit {limit:?}"),
    )
}

/// Independent arc-cosine formula for the ReLU correlation map.
fn h_oracle(c: f64) -> f64 {
    let theta = c.clamp(-1.0, 1.0).acos();
    ((PI - theta) * c + theta.sin()) / PI
}

fn h_pow(c: f64, times: u32) -> f64 {
    (0..times).fold(c, |x, _| h_oracle(x))
}

fn grid() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, nonnegative: bool) -> Array2<f64> {
    let mut x = Array2::from_shape_simple_fn((n, d), || {
        let v: f64 = rng.sample(StandardNormal);
        if nonnegative {
            v.abs()
        } else {
            v
        }
    });
    for mut row in x.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    x
}

fn gram(x: &Array2<f64>) -> DMatrix<f64> {
    let g = x.dot(&x.t());
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { g[(i, j)] })
}

fn lambda_ordering() -> Outcome {
    let start = Instant::now();
    let [(_, d1), (_, d2), (_, d3)] = builtin::all();
    let mut worst_gap = f64::INFINITY;
    for k0 in grid() {
        let lambda = |g: &ArchGraph| exact_lambda(g, k0).map_err(|e| format!("k0={k0}: {e}"));
        let (l1, l2, l3) = (lambda(&d1)?, lambda(&d2)?, lambda(&d3)?);
        ensure(l1 < l2 && l2 < l3, format!("k0={k0}: {l1} {l2} {l3}"))?;
        worst_gap = worst_gap.min(l2 - l1).min(l3 - l2);
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1), "ordering sweep")?;
    Ok(format!(
        "100 grid points strictly ordered, min gap {worst_gap:.3e}, {elapsed:?}"
    ))
}

fn closed_forms() -> Outcome {
    let [(_, d1), (_, d2), (_, d3)] = builtin::all();
    let mut worst: f64 = 0.0;
    for x in grid() {
        let want = [
            1.0 - h_pow(x, 3),
            3.0 * (1.0 - h_oracle(x)),
            4.0 - (x + h_oracle(x) + 2.0 * h_pow(x, 2)),
        ];
        for (g, w) in [&d1, &d2, &d3].into_iter().zip(want) {
            let got = exact_lambda(g, x).map_err(|e| e.to_string())?;
            worst = worst.max((got - w).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn h_monte_carlo() -> Outcome {
    const SAMPLES: usize = 10_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for c in [0.0f64, 0.25, 0.5, 0.75, 0.95] {
        let s = (1.0 - c * c).sqrt();
        let mut sum = 0.0;
        for _ in 0..SAMPLES {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let (u, v) = (z1, c * z1 + s * z2);
            sum += u.max(0.0) * v.max(0.0);
        }
        let estimate = 2.0 * sum / SAMPLES as f64;
        let got = relu_h(c).map_err(|e| e.to_string())?;
        let err = (got - estimate).abs();
        ensure(err < 3e-3, format!("c={c}: h={got} estimate={estimate}"))?;
        worst = worst.max(err);
    }
    let h0 = relu_h(0.0).map_err(|e| e.to_string())?;
    let h1 = relu_h(1.0).map_err(|e| e.to_string())?;
    ensure((h0 - 1.0 / PI).abs() <= 1e-12, format!("h(0) = {h0}"))?;
    ensure((h1 - 1.0).abs() <= 1e-12, format!("h(1) = {h1}"))?;
    Ok(format!(
        "max |h - MC| {worst:.1e} over 1e7 samples; endpoints exact"
    ))
}

fn interlace() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tightest = f64::INFINITY;
    for case in 0..200 {
        let n = rng.random_range(2..=10);
        let rank = rng.random_range(1..=n);
        let a = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let k = &a * a.transpose();
        let bound = pairwise_bound(&k).lambda_upper;
        let lambda = min_eigenvalue(&k);
        ensure(
            lambda <= bound + 1e-10,
            format!("case {case}: λ_min={lambda} > bound={bound}"),
        )?;
        tightest = tightest.min(bound - lambda);
    }
    Ok(format!("200 PSD matrices, smallest slack {tightest:.2e}"))
}

fn full_rank() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut smallest = f64::INFINITY;
    for set in 0..50 {
        // fewer dimensions than points, so only the nonlinearity can give full rank
        let x = unit_rows(&mut rng, 8, 5, false);
        let g0 = gram(&x);
        for (name, g) in builtin::all() {
            let k = full_kernel(&g, &g0).map_err(|e| format!("set {set} {name}: {e}"))?;
            let lambda = min_eigenvalue(&k);
            ensure(lambda > 1e-8, format!("set {set} {name}: λ_min={lambda:e}"))?;
            smallest = smallest.min(lambda);
        }
    }
    Ok(format!("50 sets x 3 cells, smallest λ_min {smallest:.3e}"))
}

fn metrics_sweep() -> Outcome {
    let start = Instant::now();
    let all: Vec<(String, ArchGraph)> = enumerate_space_nb201().collect();
    let metrics: Vec<_> = all.iter().map(|(_, g)| graph_metrics(g)).collect();
    let elapsed = start.elapsed();
    ensure(all.len() == 15_625, format!("{} architectures", all.len()))?;
    within(elapsed, Duration::from_secs(10), "space sweep")?;
    let ok = metrics.iter().filter(|m| m.is_ok()).count();

    let expected = [(3.0, 1.0 / 3.0), (1.0, 3.0), (1.25, 2.4)];
    for ((name, g), (d, m)) in builtin::all().iter().zip(expected) {
        let got = graph_metrics(g).map_err(|e| e.to_string())?;
        ensure(
            got.eff_depth == d && got.eff_width == m,
            format!("{name}: ({}, {})", got.eff_depth, got.eff_width),
        )?;
    }

    let full = space_extremes(all.iter().map(|(_, g)| g))
        .map_err(|e| e.to_string())?
        .config;
    let subset: Vec<ArchGraph> = Nb201Cell::all()
        .filter(|c| c.num_convs() == 3)
        .map(|c| c.to_graph())
        .collect();
    let three = space_extremes(&subset).map_err(|e| e.to_string())?.config;
    let near = |c: &FilterConfig| {
        (c.center_depth - 1.6).abs() <= 0.1 && (c.center_width - 2.2).abs() <= 0.1
    };
    ensure(
        near(&full) || near(&three),
        format!(
            "full center ({:.4}, {:.4}), 3-conv center ({:.4}, {:.4})",
            full.center_depth, full.center_width, three.center_depth, three.center_width
        ),
    )?;
    Ok(format!(
        "{ok} finite-metric archs in {elapsed:?}; full center ({:.4}, {:.4}) near={}, 3-conv center ({:.4}, {:.4}) near={}",
        full.center_depth,
        full.center_width,
        near(&full),
        three.center_depth,
        three.center_width,
        near(&three)
    ))
}

fn filter_chain() -> Outcome {
    let start = Instant::now();
    let paper = FilterConfig::new(1.6, 2.2, 1.4, 1.8, 0.5).map_err(|e| e.to_string())?;
    let space: Vec<(String, Option<TopoMetrics>)> = enumerate_space_nb201()
        .map(|(s, g)| (s, graph_metrics(&g).ok()))
        .collect();
    let reference = |cfg: &FilterConfig, m: &TopoMetrics| {
        (m.eff_depth - cfg.center_depth).abs() <= cfg.keep_fraction * cfg.radius_depth
            && (m.eff_width - cfg.center_width).abs() <= cfg.keep_fraction * cfg.radius_width
    };
    let kept = |cfg: &FilterConfig| -> Vec<bool> {
        space
            .iter()
            .map(|(_, m)| m.as_ref().is_some_and(|m| filter_keep(m, cfg)))
            .collect()
    };
    let kept_paper = kept(&paper);
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10), "full-space filter")?;

    for ((s, m), &k) in space.iter().zip(&kept_paper) {
        ensure(
            k == m.as_ref().is_some_and(|m| reference(&paper, m)),
            format!("{s}: library verdict differs"),
        )?;
    }
    let dag1 = space
        .iter()
        .position(|(s, _)| s == builtin::DAG1_NB201)
        .ok_or("DAG#1 not in space")?;
    ensure(!kept_paper[dag1], "DAG#1 was kept")?;

    let mut counts = Vec::new();
    let mut previous: Option<Vec<bool>> = None;
    for fraction in [1.0, 0.75, 0.5, 0.25] {
        let now = kept(&paper.with_keep_fraction(fraction));
        if let Some(prev) = &previous {
            ensure(
                now.iter().zip(prev).all(|(&k, &before)| !k || before),
                format!("not nested at {fraction}"),
            )?;
        }
        counts.push(now.iter().filter(|&&k| k).count());
        previous = Some(now);
    }
    Ok(format!(
        "DAG#1 dropped; kept counts for keep_fraction 1, 3/4, 1/2, 1/4: {counts:?}; {elapsed:?}"
    ))
}

fn max_gradient_error(g: &ArchGraph) -> Result<f64, String> {
    let data = Dataset::synthetic_blobs(3, 1, 6, 0.5, 3).map_err(|e| e.to_string())?;
    let cfg = SimConfig {
        width: 8,
        seed: 5,
        ..SimConfig::default()
    };
    let mut net = build_net(g, 6, 3, &cfg).map_err(|e| e.to_string())?;
    let x = data.features.view();
    let (_, grads) = net.loss_and_gradients(x, &data.labels, Loss::Mse);
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, analytic) in grads.0.iter().enumerate() {
        for ((r, c), &a) in analytic.indexed_iter() {
            let mut loss_at = |delta: f64| {
                net.params_mut().nth(k).unwrap()[(r, c)] += delta;
                let value = net.loss(x, &data.labels, Loss::Mse);
                net.params_mut().nth(k).unwrap()[(r, c)] -= delta;
                value
            };
            let numeric = (loss_at(step) - loss_at(-step)) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn gradient_check() -> Outcome {
    let mut parts = Vec::new();
    for (name, g) in builtin::all() {
        let err = max_gradient_error(&g)?;
        ensure(err < 1e-3, format!("{name}: relative error {err:e}"))?;
        parts.push(format!("{name} {err:.1e}"));
    }
    Ok(format!("max relative error: {}", parts.join(", ")))
}

fn nngp_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = unit_rows(&mut rng, 6, 16, true);
    let g0 = gram(&x);
    let seeds: Vec<u64> = (0..200).collect();
    let mut parts = Vec::new();
    for (name, g) in builtin::all() {
        let want = full_kernel(&g, &g0).map_err(|e| e.to_string())?;
        let got = empirical_output_gram(&g, x.view(), 512, &seeds).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for ((i, j), &v) in got.indexed_iter() {
            worst = worst.max((v - want[(i, j)]).abs() / want[(i, j)].abs());
        }
        ensure(
            worst < 0.05,
            format!("{name}: worst relative error {worst:.4}"),
        )?;
        parts.push(format!("{name} {worst:.4}"));
    }
    Ok(format!("worst relative Gram error: {}", parts.join(", ")))
}

fn convergence_ordering() -> Outcome {
    let start = Instant::now();
    let data = Dataset::default_synthetic(0);
    let cfg = SimConfig::default();
    let graphs: Vec<(String, ArchGraph)> = builtin::all()
        .into_iter()
        .map(|(n, g)| (n.to_string(), g))
        .collect();
    let rows = compare_dags(&graphs, &data, &cfg, &[0, 1, 2, 3, 4], DEFAULT_THRESHOLD)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(600), "simulation")?;
    let epochs = |name: &str| {
        rows.iter()
            .find(|r| r.name == name)
            .and_then(|r| r.median_epochs)
            .unwrap_or(f64::INFINITY)
    };
    let (e1, e2, e3) = (epochs("dag1"), epochs("dag2"), epochs("dag3"));
    for r in &rows {
        for (seed, run) in &r.runs {
            if let Ok(trace) = run {
                let frac = trace.nonincreasing_fraction();
                if frac < 0.9 {
                    eprintln!(
                        "note: {} seed {seed} loss non-increasing in only {:.0}% of epochs",
                        r.name,
                        frac * 100.0
                    );
                }
            }
        }
    }
    ensure(
        e3 <= e2 && e2 <= e1,
        format!("median epochs dag3={e3} dag2={e2} dag1={e1}"),
    )?;
    Ok(format!(
        "median epochs to 80%: dag3={e3} dag2={e2} dag1={e1}; {elapsed:?}"
    ))
}

fn multi_correlation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let d: Vec<f64> = (0..500).map(|_| rng.random_range(0.25..3.0)).collect();
    let m: Vec<f64> = (0..500).map(|_| rng.random_range(0.3..4.0)).collect();
    let y: Vec<f64> = d
        .iter()
        .zip(&m)
        .map(|(a, b)| 0.7 - 1.3 * a + 0.4 * b)
        .collect();
    let exact = multi_correlation_columns(&d, &m, &y)
        .map_err(|e| e.to_string())?
        .r;
    ensure(
        (exact - 1.0).abs() <= 1e-9,
        format!("linear data R = {exact}"),
    )?;

    let n = 10_000;
    let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let m: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let noise = multi_correlation_columns(&d, &m, &y)
        .map_err(|e| e.to_string())?
        .r;
    ensure(noise < 0.05, format!("independent data R = {noise}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 5..40),
        0.1..10.0f64,
        -10.0..10.0f64,
        prop_oneof![Just(-1.0), Just(1.0)],
        -10.0..10.0f64,
    );
    runner
        .run(&strategy, |(rows, scale, shift, sign, y_shift)| {
            let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let Ok(base) = multi_correlation_columns(&d, &m, &y) else {
                return Ok(());
            };
            let d2: Vec<f64> = d.iter().map(|v| sign * scale * v + shift).collect();
            let y2: Vec<f64> = y.iter().map(|v| 2.5 * v + y_shift).collect();
            let moved = multi_correlation_columns(&d2, &m, &y2)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!((base.r - moved.r).abs() < 1e-9, "{} vs {}", base.r, moved.r);
            Ok(())
        })
        .map_err(|e| format!("affine invariance: {e}"))?;
    Ok(format!(
        "linear R = {exact:.12}, independent R = {noise:.4}, affine invariance held over 256 cases"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("lambda ordering", lambda_ordering),
        ("closed forms", closed_forms),
        ("h Monte Carlo", h_monte_carlo),
        ("Cauchy interlace", interlace),
        ("full rank", full_rank),
        ("topology metrics", metrics_sweep),
        ("filter", filter_chain),
        ("gradient check", gradient_check),
        ("NNGP consistency", nngp_consistency),
        ("convergence ordering", convergence_ordering),
        ("multiple correlation", multi_correlation),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
