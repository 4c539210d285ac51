use std::fs;
use std::io::Write;
use std::path::Path;

use dagconv::graph::{builtin, enumerate_paths, enumerate_space_nb201, ArchGraph, OpKind};
use dagconv::metrics::{
    compute_metrics, filter_verdict, graph_metrics, ExtremesAccumulator, FilterConfig,
    FilterOverrides, MetricsError, Verdict,
};
use dagconv::nngp::{
    exact_lambda, format_matrix, full_kernel, linspace, min_eigenvalue, ordering_rows,
    pairwise_bound, parse_matrix, simplified_rule_bound, KernelError,
};
use dagconv::sim::{
    comparison_tsv, rank_rows, run_once, summarize_runs, Dataset, Loss, SimConfig, SimError,
};
use dagconv::stats::{bin_by_metrics, ingest_csv, multi_correlation, CorrelationMode};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::input::{
    open_input, open_output, read_file, resolve_arch, stream_lines, RowError, Tally,
};
use crate::{
    AnalyzeArgs, CorrelateArgs, DagSet, FilterArgs, KernelArgs, LossArg, ModeArg, SimulateArgs,
    SpaceStatsArgs,
};

fn check_k0(k0: f64) -> CliResult<f64> {
    if (0.0..1.0).contains(&k0) {
        Ok(k0)
    } else {
        Err(CliError::config(
            "DomainError",
            format!("k0 must lie in [0, 1), got {k0}"),
        ))
    }
}

fn cell<T: ToString, E>(
    value: Result<T, E>,
    code: impl Fn(&E) -> &'static str,
    codes: &mut Vec<&'static str>,
) -> String {
    match value {
        Ok(v) => v.to_string(),
        Err(e) => {
            let c = code(&e);
            if !codes.contains(&c) {
                codes.push(c);
            }
            format!("ERR:{c}")
        }
    }
}

const ANALYZE_COLUMNS: &str = "arch\tP\tsum_depth\teff_depth\teff_width\tlambda_exact\tlambda_eq10";

/// Value columns for one line, plus the distinct error codes among them.
fn analyze_line(line: &str, k0: f64) -> (String, Vec<&'static str>) {
    let mut codes = Vec::new();
    let g = match resolve_arch(line) {
        Ok(g) => g,
        Err(RowError { code, .. }) => {
            return (vec![format!("ERR:{code}"); 6].join("\t"), vec![code])
        }
    };
    let profile = enumerate_paths(&g);
    let metrics = compute_metrics(&profile);
    let cols = [
        profile.num_paths().to_string(),
        profile.sum_depths().to_string(),
        cell(
            metrics.as_ref().map(|m| m.eff_depth),
            |e: &&MetricsError| e.code(),
            &mut codes,
        ),
        cell(
            metrics.as_ref().map(|m| m.eff_width),
            |e: &&MetricsError| e.code(),
            &mut codes,
        ),
        cell(exact_lambda(&g, k0), KernelError::code, &mut codes),
        cell(
            simplified_rule_bound(&profile, k0),
            KernelError::code,
            &mut codes,
        ),
    ];
    (cols.join("\t"), codes)
}

pub fn analyze(args: AnalyzeArgs) -> CliResult<()> {
    let k0 = check_k0(args.k0)?;
    let reader = open_input(args.io.input.as_deref())?;
    let mut out = open_output(args.io.output.as_deref())?;
    let (mut rows, mut bad) = (0usize, 0usize);
    let mut codes = Tally::default();
    stream_lines(
        reader,
        args.io.parallel,
        |line| analyze_line(line, k0),
        |line, (values, errs)| {
            if rows == 0 {
                writeln!(out, "# analyze k0={k0}")?;
                writeln!(out, "{ANALYZE_COLUMNS}")?;
            }
            rows += 1;
            if !errs.is_empty() {
                bad += 1;
                errs.iter().for_each(|c| codes.add(c));
            }
            writeln!(out, "{}\t{values}", line.trim())?;
            Ok(())
        },
    )?;
    out.flush()?;
    eprintln!("rows={rows}");
    eprintln!("ok={}", rows - bad);
    eprintln!("errors={bad}");
    codes.report("err");
    Ok(())
}

fn flag_overrides(args: &FilterArgs) -> FilterOverrides {
    FilterOverrides {
        center_depth: args.center_depth,
        center_width: args.center_width,
        radius_depth: args.radius_depth,
        radius_width: args.radius_width,
        keep_fraction: args.keep_fraction,
    }
}

fn file_overrides(path: Option<&Path>) -> CliResult<FilterOverrides> {
    match path {
        None => Ok(FilterOverrides::default()),
        Some(p) => {
            let text = read_file(p, "filter config")?;
            FilterOverrides::from_kv_str(&text).map_err(|e| CliError::config(e.code(), e))
        }
    }
}

enum Decision {
    Keep,
    Drop(&'static str),
    Error(&'static str),
}

fn decide(graph: Result<ArchGraph, RowError>, cfg: &FilterConfig) -> Decision {
    let g = match graph {
        Ok(g) => g,
        Err(e) => return Decision::Error(e.code),
    };
    match graph_metrics(&g) {
        Ok(m) => match filter_verdict(&m, cfg) {
            Verdict::Keep => Decision::Keep,
            v => Decision::Drop(v.name()),
        },
        Err(MetricsError::NoPath) => Decision::Drop("no_path"),
        Err(MetricsError::DepthZero) => Decision::Drop("depth_zero"),
        Err(e) => Decision::Error(e.code()),
    }
}

pub fn filter(args: FilterArgs) -> CliResult<()> {
    let from_file = file_overrides(args.config.as_deref())?;
    let from_flags = flag_overrides(&args);
    if !args.auto && args.config.is_none() && from_flags.is_empty() {
        return Err(CliError::config(
            "ConfigMissing",
            "give --config, the center/radius flags, or --auto",
        ));
    }
    let layered = from_file.overridden_by(from_flags);
    let reader = open_input(args.io.input.as_deref())?;
    let mut out = open_output(args.io.output.as_deref())?;
    let (mut kept, mut dropped, mut errors) = (0usize, Tally::default(), Tally::default());

    let mut emit = |out: &mut Box<dyn Write>, line: &str, d: Decision| -> CliResult<()> {
        match d {
            Decision::Keep => {
                kept += 1;
                writeln!(out, "{line}")?;
            }
            Decision::Drop(why) => dropped.add(why),
            Decision::Error(code) => errors.add(code),
        }
        Ok(())
    };

    if args.auto {
        let lines: Vec<String> = {
            let mut v = Vec::new();
            stream_lines(
                reader,
                false,
                |_| (),
                |line, ()| {
                    v.push(line.trim().to_string());
                    Ok(())
                },
            )?;
            v
        };
        let graphs: Vec<Result<ArchGraph, RowError>> = if args.io.parallel {
            lines.par_iter().map(|l| resolve_arch(l)).collect()
        } else {
            lines.iter().map(|l| resolve_arch(l)).collect()
        };
        let mut acc = ExtremesAccumulator::default();
        for g in graphs.iter().flatten() {
            acc.push(graph_metrics(g));
        }
        let base = acc
            .finish()
            .map_err(|e| CliError::input(e.code(), e))?
            .config;
        let cfg = overrides_of(&base)
            .overridden_by(layered)
            .resolve()
            .map_err(|e| CliError::config(e.code(), e))?;
        write_filter_header(&mut out, &cfg, true)?;
        for (line, g) in lines.iter().zip(graphs) {
            emit(&mut out, line, decide(g, &cfg))?;
        }
    } else {
        let cfg = layered
            .resolve()
            .map_err(|e| CliError::config(e.code(), e))?;
        write_filter_header(&mut out, &cfg, false)?;
        stream_lines(
            reader,
            args.io.parallel,
            |line| decide(resolve_arch(line), &cfg),
            |line, d| emit(&mut out, line.trim(), d),
        )?;
    }
    out.flush()?;
    eprintln!("kept={kept}");
    eprintln!("dropped={}", dropped.total());
    eprintln!("errors={}", errors.total());
    dropped.report("dropped");
    errors.report("err");
    Ok(())
}

fn overrides_of(cfg: &FilterConfig) -> FilterOverrides {
    FilterOverrides {
        center_depth: Some(cfg.center_depth),
        center_width: Some(cfg.center_width),
        radius_depth: Some(cfg.radius_depth),
        radius_width: Some(cfg.radius_width),
        keep_fraction: Some(cfg.keep_fraction),
    }
}

fn write_filter_header(out: &mut Box<dyn Write>, cfg: &FilterConfig, auto: bool) -> CliResult<()> {
    writeln!(
        out,
        "# filter auto={auto} center_depth={} center_width={} radius_depth={} radius_width={} keep_fraction={}",
        cfg.center_depth, cfg.center_width, cfg.radius_depth, cfg.radius_width, cfg.keep_fraction
    )?;
    Ok(())
}

/// `start:end:count`.
fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::config("BadGrid", format!("expected start:end:count, got `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, end, count] = parts.as_slice() else {
        return Err(bad());
    };
    let start: f64 = start.trim().parse().map_err(|_| bad())?;
    let end: f64 = end.trim().parse().map_err(|_| bad())?;
    let count: usize = count.trim().parse().map_err(|_| bad())?;
    if count == 0 {
        return Err(bad());
    }
    let grid = linspace(start, end, count);
    for &k0 in &grid {
        check_k0(k0)?;
    }
    Ok(grid)
}

fn kernel_err(e: KernelError) -> CliError {
    match e {
        KernelError::OrderingViolation { .. } | KernelError::InvalidState { .. } => {
            CliError::internal(e.code(), e)
        }
        KernelError::DomainError(_) | KernelError::BadInputCorrelation(_) => {
            CliError::config(e.code(), e)
        }
        _ => CliError::input(e.code(), e),
    }
}

pub fn kernel(args: KernelArgs) -> CliResult<()> {
    let graph = match (&args.graph, &args.arch) {
        (Some(path), _) => Some(crate::input::load_graph_file(path)?),
        (None, Some(arch)) => {
            Some(resolve_arch(arch).map_err(|e| CliError::input(e.code, e.message))?)
        }
        (None, None) => None,
    };
    let mut out = open_output(args.output.as_deref())?;

    if let Some(path) = &args.matrix {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input("Io", format!("{}: {e}", path.display())))?;
        let gram0 = parse_matrix(&text).map_err(kernel_err)?;
        let k = match &graph {
            Some(g) => full_kernel(g, &gram0).map_err(kernel_err)?,
            None => gram0,
        };
        let bound = pairwise_bound(&k);
        writeln!(
            out,
            "# kernel matrix={} graph={}",
            path.display(),
            graph.is_some()
        )?;
        writeln!(out, "lambda_min\t{}", min_eigenvalue(&k))?;
        writeln!(out, "pairwise_bound\t{}", bound.lambda_upper)?;
        writeln!(out, "pair\t{}\t{}", bound.pair_index.0, bound.pair_index.1)?;
        if graph.is_some() {
            writeln!(out, "# output kernel")?;
            write!(out, "{}", format_matrix(&k))?;
        }
        out.flush()?;
        return Ok(());
    }

    let grid = match (args.k0, &args.grid) {
        (Some(k0), _) => vec![check_k0(k0)?],
        (None, Some(spec)) => parse_grid(spec)?,
        (None, None) => vec![0.5],
    };

    match (args.dags, graph) {
        (Some(DagSet::Builtin3), _) | (None, None) => {
            let rows = ordering_rows(&grid).map_err(kernel_err)?;
            writeln!(out, "# kernel dags=builtin3 points={}", grid.len())?;
            writeln!(out, "k0\tlambda_dag1\tlambda_dag2\tlambda_dag3\tordering")?;
            let mut violations = 0;
            for r in &rows {
                let status = if r.is_ordered() { "ok" } else { "VIOLATION" };
                violations += usize::from(!r.is_ordered());
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{status}",
                    r.k0, r.lambdas[0], r.lambdas[1], r.lambdas[2]
                )?;
            }
            out.flush()?;
            eprintln!("points={}", rows.len());
            eprintln!("violations={violations}");
            if violations > 0 {
                return Err(CliError::internal(
                    "OrderingViolation",
                    format!("{violations} grid points out of order"),
                ));
            }
        }
        (None, Some(g)) => {
            let profile = enumerate_paths(&g);
            writeln!(
                out,
                "# kernel paths={} sum_depth={}",
                profile.num_paths(),
                profile.sum_depths()
            )?;
            writeln!(out, "k0\tlambda_exact\tlambda_eq10")?;
            for &k0 in &grid {
                let exact = exact_lambda(&g, k0).map_err(kernel_err)?;
                let rule = simplified_rule_bound(&profile, k0).map_err(kernel_err)?;
                writeln!(out, "{k0}\t{exact}\t{rule}")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn correlate(args: CorrelateArgs) -> CliResult<()> {
    let report = ingest_csv(&args.input).map_err(|e| CliError::input(e.code(), e))?;
    for e in &report.errors {
        eprintln!("row={} code={} reason={}", e.row, e.code(), e.reason);
    }
    let mode = match args.mode {
        ModeArg::PerRecord => CorrelationMode::PerRecord,
        ModeArg::BinMean => CorrelationMode::BinMean,
    };
    let corr =
        multi_correlation(&report.records, mode).map_err(|e| CliError::input(e.code(), e))?;
    let bins = bin_by_metrics(&report.records);
    let mut out = open_output(args.output.as_deref())?;
    let mode_name = match args.mode {
        ModeArg::PerRecord => "per-record",
        ModeArg::BinMean => "bin-mean",
    };
    writeln!(
        out,
        "# correlate mode={mode_name} records={} row_errors={}",
        report.records.len(),
        report.errors.len()
    )?;
    writeln!(out, "R\t{}", corr.r)?;
    writeln!(out, "r_depth_acc\t{}", corr.r_depth_acc)?;
    writeln!(out, "r_width_acc\t{}", corr.r_width_acc)?;
    writeln!(out, "r_depth_width\t{}", corr.r_depth_width)?;
    writeln!(out, "n\t{}", corr.n)?;
    writeln!(out, "# bins")?;
    writeln!(out, "eff_depth\teff_width\tcount\tmean_acc\tstd_acc")?;
    for b in &bins {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            b.eff_depth, b.eff_width, b.count, b.mean_acc, b.std_acc
        )?;
    }
    out.flush()?;
    eprintln!("records={}", report.records.len());
    eprintln!("row_errors={}", report.errors.len());
    eprintln!("bins={}", bins.len());
    Ok(())
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::InvalidConfig(_) | SimError::DimensionMismatch { .. } => {
            CliError::config(e.code(), e)
        }
        _ => CliError::input(e.code(), e),
    }
}

fn simulate_graphs(args: &SimulateArgs) -> CliResult<Vec<(String, ArchGraph)>> {
    let mut graphs: Vec<(String, ArchGraph)> = Vec::new();
    if args.builtin3 {
        graphs.extend(builtin::all().into_iter().map(|(n, g)| (n.to_string(), g)));
    }
    for path in &args.graph {
        let name = path
            .file_stem()
            .map_or("graph".into(), |s| s.to_string_lossy().into_owned());
        graphs.push((name, crate::input::load_graph_file(path)?));
    }
    for (i, arch) in args.arch.iter().enumerate() {
        let g = resolve_arch(arch).map_err(|e| CliError::input(e.code, e.message))?;
        graphs.push((format!("arch{}", i + 1), g));
    }
    if graphs.len() < 2 {
        return Err(CliError::config(
            "InvalidConfig",
            "need at least two graphs (try --builtin3)",
        ));
    }
    Ok(graphs)
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let defaults = SimConfig::default();
    let cfg = SimConfig {
        width: args.width.unwrap_or(defaults.width),
        lr: args.lr.unwrap_or(defaults.lr),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        seed: args.seed,
        loss: match args.loss {
            LossArg::Mse => Loss::Mse,
            LossArg::CrossEntropy => Loss::CrossEntropy,
        },
        sign_mixing: !args.no_sign_mixing,
    };
    cfg.validate().map_err(sim_err)?;
    if args.seeds == 0 {
        return Err(CliError::config(
            "InvalidConfig",
            "--seeds must be at least 1",
        ));
    }
    let graphs = simulate_graphs(&args)?;
    let (data, data_desc) = match &args.data {
        Some(path) => {
            let f = fs::File::open(path)
                .map_err(|e| CliError::input("Io", format!("{}: {e}", path.display())))?;
            (
                Dataset::from_csv_features(f).map_err(sim_err)?,
                path.display().to_string(),
            )
        }
        None => (
            Dataset::default_synthetic(args.seed),
            format!("synthetic(seed={})", args.seed),
        ),
    };
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();

    let jobs: Vec<(usize, u64)> = (0..graphs.len())
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let run = |&(gi, seed): &(usize, u64)| {
        run_once(
            &graphs[gi].1,
            &data,
            &SimConfig {
                seed,
                ..cfg.clone()
            },
        )
    };
    let results: Vec<_> = if args.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut results = results.into_iter();
    let mut rows: Vec<_> = graphs
        .iter()
        .map(|(name, _)| {
            let runs = seeds
                .iter()
                .map(|&s| (s, results.next().expect("one result per job")))
                .collect();
            summarize_runs(name.clone(), runs, args.threshold)
        })
        .collect();
    rank_rows(&mut rows);

    if let Some(dir) = &args.trace_dir {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::input("Io", format!("{}: {e}", dir.display())))?;
        for row in &rows {
            for (seed, run) in &row.runs {
                let trace = match run {
                    Ok(t) => t,
                    Err(SimError::Divergence { trace, .. }) => trace,
                    Err(_) => continue,
                };
                fs::write(
                    dir.join(format!("{}-seed{seed}.csv", row.name)),
                    trace.to_csv(),
                )?;
            }
        }
    }

    let mut out = open_output(args.output.as_deref())?;
    writeln!(
        out,
        "# simulate width={} lr={} batch_size={} epochs={} loss={:?} sign_mixing={} seeds={}..{} data={data_desc}",
        cfg.width,
        cfg.lr,
        cfg.batch_size,
        cfg.epochs,
        cfg.loss,
        cfg.sign_mixing,
        seeds[0],
        seeds[seeds.len() - 1],
    )?;
    write!(out, "{}", comparison_tsv(&rows, args.threshold))?;
    out.flush()?;
    let failed: Vec<_> = rows
        .iter()
        .flat_map(|r| {
            r.runs
                .iter()
                .filter_map(move |(s, t)| Some((r, s, t.as_ref().err()?)))
        })
        .collect();
    eprintln!("runs={}", jobs.len());
    eprintln!("failed_runs={}", failed.len());
    for (row, seed, e) in failed {
        eprintln!("run={} seed={seed} code={} reason={e}", row.name, e.code());
    }
    Ok(())
}

pub fn space_stats(args: SpaceStatsArgs) -> CliResult<()> {
    let keep = |g: &ArchGraph| args.convs.is_none_or(|n| g.count_ops(OpKind::Param) == n);
    let mut row_errors = Tally::default();
    let acc = if args.nb201 {
        let space: Vec<ArchGraph> = enumerate_space_nb201()
            .map(|(_, g)| g)
            .filter(|g| keep(g))
            .collect();
        if args.io.parallel {
            space
                .par_iter()
                .fold(ExtremesAccumulator::default, |mut a, g| {
                    a.push(graph_metrics(g));
                    a
                })
                .reduce(ExtremesAccumulator::default, ExtremesAccumulator::merge)
        } else {
            let mut a = ExtremesAccumulator::default();
            space.iter().for_each(|g| a.push(graph_metrics(g)));
            a
        }
    } else {
        let reader = open_input(args.io.input.as_deref())?;
        let mut a = ExtremesAccumulator::default();
        stream_lines(reader, args.io.parallel, resolve_arch, |_, g| {
            match g {
                Ok(g) if keep(&g) => a.push(graph_metrics(&g)),
                Ok(_) => {}
                Err(e) => row_errors.add(e.code),
            }
            Ok(())
        })?;
        a
    };
    let stats = acc.finish().map_err(|e| CliError::input(e.code(), e))?;
    let c = stats.config;
    let mut out = open_output(args.io.output.as_deref())?;
    let space = if args.nb201 {
        "nb201".to_string()
    } else {
        "input".to_string()
    };
    let convs = args.convs.map_or("all".to_string(), |n| n.to_string());
    writeln!(out, "# space-stats space={space} convs={convs}")?;
    writeln!(
        out,
        "center_depth\tcenter_width\tradius_depth\tradius_width\tdepth_min\tdepth_max\twidth_min\twidth_max\tconsidered\tskipped"
    )?;
    writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        c.center_depth,
        c.center_width,
        c.radius_depth,
        c.radius_width,
        stats.depth_range.0,
        stats.depth_range.1,
        stats.width_range.0,
        stats.width_range.1,
        stats.considered,
        stats.skipped
    )?;
    out.flush()?;
    if let Some(path) = &args.config_out {
        fs::write(path, c.to_string())?;
    }
    eprintln!("considered={}", stats.considered);
    eprintln!("skipped={}", stats.skipped);
    eprintln!("errors={}", row_errors.total());
    row_errors.report("err");
    Ok(())
}
