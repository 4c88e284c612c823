use std::path::Path;

use log::{info, warn};
use tvcm_core::graph::{neighborhood_selection, GraphConfig, MultiSeries};
use tvcm_core::inference::{infer_path, interior_grid, null_distribution_at};
use tvcm_core::local_design::{Dataset, KernelSpec};
use tvcm_core::simulate::{run_simulation, Method};

use crate::config::FileConfig;
use crate::error::{CliError, Result};
use crate::io::{ensure_dir, fmt_f64, read_regression, read_series, write_text, CsvOut};

fn resolve_grid(explicit: &[f64], cfg: &FileConfig, n: usize, kernel: &KernelSpec) -> Vec<f64> {
    if !explicit.is_empty() {
        explicit.to_vec()
    } else if let Some(g) = &cfg.grid {
        g.clone()
    } else {
        interior_grid(n, kernel)
    }
}

pub fn infer(input: &Path, times: &[f64], cfg: &FileConfig, out: &Path) -> Result<()> {
    let pipeline = cfg.pipeline.build();
    pipeline.kernel.validate()?;
    let reg = read_regression(input, true)?;
    let data = Dataset::new(reg.x, reg.y.expect("response required"))
        .map_err(|e| CliError::data(input, e.to_string()))?;
    let grid = resolve_grid(times, cfg, data.n(), &pipeline.kernel);
    if grid.is_empty() {
        return Err(CliError::Config("no grid point lies in the interior interval".into()));
    }
    pipeline.validate(data.n())?;
    ensure_dir(out)?;
    info!("infer: n = {}, p = {}, {} grid points", data.n(), data.p(), grid.len());

    let fits = infer_path(&data, &grid, &pipeline)?;
    let mut table = CsvOut::create(
        out.join("infer.csv"),
        &["t", "j", "beta_hat", "raw_p", "adj_p", "rejected"],
    )?;
    let mut failures = Vec::new();
    for (fit, &t) in fits.into_iter().zip(&grid) {
        match fit {
            Ok(fit) => {
                for j in 0..data.p() {
                    let rejected = fit.adj_p[j] <= pipeline.inference.alpha;
                    table.row([
                        fmt_f64(t),
                        (j + 1).to_string(),
                        fmt_f64(fit.estimate.beta_hat[j]),
                        fmt_f64(fit.raw_p[j]),
                        fmt_f64(fit.adj_p[j]),
                        u8::from(rejected).to_string(),
                    ])?;
                }
            }
            Err(e) => {
                warn!("t = {t}: {e}");
                failures.push((t, e));
            }
        }
    }
    table.finish()?;
    if failures.is_empty() {
        return Ok(());
    }
    let mut errors = CsvOut::create(out.join("infer_errors.csv"), &["t", "error"])?;
    for (t, e) in &failures {
        errors.row([fmt_f64(*t), e.to_string()])?;
    }
    errors.finish()?;
    Err(failures.swap_remove(0).1.into())
}

pub fn simulate(
    cfg: &FileConfig,
    replications: Option<usize>,
    methods: &[Method],
    out: &Path,
) -> Result<()> {
    let mut sim = cfg.simulation.clone();
    if let Some(m) = replications {
        sim.replications = m;
    }
    if !methods.is_empty() {
        sim.methods = methods.to_vec();
    }
    sim.validate()?;
    ensure_dir(out)?;
    let report = run_simulation(&sim)?;
    eprintln!("simulation runtime: {:.1} s", report.runtime_secs);
    write_text(out.join("metrics.csv"), &report.to_csv())?;
    write_text(out.join("metrics.txt"), &report.to_text())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    write_text(out.join("metrics.json"), &(json + "\n"))
}

pub fn graph(input: &Path, times: &[f64], cfg: &FileConfig, out: &Path) -> Result<()> {
    let pipeline = cfg.pipeline.build();
    pipeline.kernel.validate()?;
    let (values, labels) = read_series(input)?;
    let series =
        MultiSeries::new(values, labels).map_err(|e| CliError::data(input, e.to_string()))?;
    let grid = resolve_grid(times, cfg, series.n(), &pipeline.kernel);
    if grid.is_empty() {
        return Err(CliError::Config("no grid point lies in the interior interval".into()));
    }
    ensure_dir(out)?;
    info!("graph: n = {}, d = {}, {} grid points", series.n(), series.d(), grid.len());
    let g = neighborhood_selection(
        &series,
        &grid,
        &GraphConfig {
            pipeline,
            rule: cfg.graph.rule,
        },
    )?;

    let edge_dir = out.join("edges");
    ensure_dir(&edge_dir)?;
    let width = grid.len().to_string().len().max(4);
    let mut manifest = CsvOut::create(out.join("manifest.csv"), &["index", "t", "file", "edges"])?;
    let mut long = CsvOut::create(out.join("edges_long.csv"), &["t", "node_a", "node_b", "p_value"])?;
    for (i, &t) in g.grid.iter().enumerate() {
        let name = format!("t_{:0width$}.csv", i + 1);
        let mut file = CsvOut::create(edge_dir.join(&name), &["node_a", "node_b", "p_value"])?;
        let edges = g.edges(i);
        for e in &edges {
            let (a, b, p) = (&g.labels[e.a], &g.labels[e.b], fmt_f64(e.p_value));
            file.row([a.as_str(), b.as_str(), p.as_str()])?;
            long.row([fmt_f64(t).as_str(), a, b, p.as_str()])?;
        }
        file.finish()?;
        manifest.row([
            (i + 1).to_string(),
            fmt_f64(t),
            format!("edges/{name}"),
            edges.len().to_string(),
        ])?;
    }
    manifest.finish()?;
    long.finish()
}

pub fn nulldist(input: &Path, t: f64, cfg: &FileConfig, out: &Path) -> Result<()> {
    let pipeline = cfg.pipeline.build();
    let reg = read_regression(input, pipeline.error_model.needs_residuals())?;
    let n = reg.x.nrows();
    let y = reg.y.unwrap_or_else(|| nalgebra::DVector::zeros(n));
    let data = Dataset::new(reg.x, y).map_err(|e| CliError::data(input, e.to_string()))?;
    ensure_dir(out)?;
    let null = null_distribution_at(&data, t, &pipeline)?;
    let mut file = CsvOut::create(out.join("nulldist.csv"), &["min_p"])?;
    for v in null.sample() {
        file.row([fmt_f64(*v)])?;
    }
    file.finish()
}
