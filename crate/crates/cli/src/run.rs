//! Subcommand orchestration: config → computation → files → manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use rayon::prelude::*;

use lpsv_core::cirlab::{
    malpha_report, ratio_moment_from_samples, run_density_study, DensityStudy,
};
use lpsv_core::params::cubic_root_xstar;
use lpsv_core::pool::{empirical_density_2d, loss_curve, simulate_pool, PoolOptions};
use lpsv_core::spde2d::{solve_spde_with, SpdeOptions};
use lpsv_core::verify::{
    compare_particle_grid, delta_identity_streaming, weighted_norms, DeltaSpec, MollifierSpec,
};
use lpsv_core::{
    feasible_exponents, validate_params, ExponentSet, LpsvError, NoiseBundle, SeedLineage,
    ValidationReport,
};

use crate::config::RunConfig;
use crate::manifest::{ErrorRecord, OutputRecord, RunManifest, Status};
use crate::table::{Cell, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Validate,
    SimulatePool,
    SolveSpde,
    DensityBounds,
    VerifyDelta,
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Validate => "validate",
            Subcommand::SimulatePool => "simulate-pool",
            Subcommand::SolveSpde => "solve-spde",
            Subcommand::DensityBounds => "density-bounds",
            Subcommand::VerifyDelta => "verify-delta",
            Subcommand::Report => "report",
        }
    }
}

/// Command-line overrides of the config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scenarios: Option<usize>,
    pub threads: Option<usize>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Validation(String),
    Numerical(String),
    Config(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Config(_) | Failure::Io(_) => EXIT_CONFIG,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (kind, message) = match self {
            Failure::Validation(m) => ("validation", m),
            Failure::Numerical(m) => ("numerical", m),
            Failure::Config(m) => ("config", m),
            Failure::Io(m) => ("io", m),
        };
        ErrorRecord {
            kind: kind.into(),
            message: message.clone(),
            exit_code: self.exit_code(),
        }
    }
}

impl From<LpsvError> for Failure {
    fn from(e: LpsvError) -> Self {
        match e {
            _ if e.is_numerical() => Failure::Numerical(e.to_string()),
            LpsvError::Infeasible(_) => Failure::Validation(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

/// A file produced by a subcommand, kept in memory until the run succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn csv(name: impl Into<String>, table: &Table) -> Self {
        Self {
            name: name.into(),
            contents: table.render(),
        }
    }
}

/// Result of one invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub out_dir: Option<PathBuf>,
    pub manifest: RunManifest,
    /// Human-readable lines for stdout.
    pub stdout: Vec<String>,
}

struct Context {
    cfg: RunConfig,
    validation: ValidationReport,
    exponents: Vec<ExponentSet>,
    stdout: Vec<String>,
}

/// Runs one subcommand end to end, writing files and the manifest.
pub fn run(cmd: Subcommand, config_path: &Path, ov: &Overrides) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::load(config_path).map(|mut c| {
        if let Some(o) = &ov.out {
            c.output_dir = o.clone();
        }
        if let Some(s) = ov.seed {
            c.monte_carlo.base_seed = s;
        }
        if let Some(n) = ov.scenarios {
            c.monte_carlo.n_scenarios = n;
        }
        c.grid.y_max = Some(c.y_max());
        c
    });
    let out_dir = match &cfg {
        Ok(c) => Some(c.output_dir.clone()),
        Err(_) => ov.out.clone(),
    };
    let threads = ov.threads.unwrap_or(0);
    let mut manifest = RunManifest {
        status: Status::Failed,
        subcommand: cmd.name().into(),
        code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: cfg.as_ref().ok().cloned(),
        validation: None,
        x_star: cubic_root_xstar(),
        exponents: Vec::new(),
        threads,
        wall_clock_seconds: 0.0,
        outputs: Vec::new(),
        error: None,
    };
    let mut stdout = Vec::new();

    let result = cfg.map_err(Failure::Config).and_then(|cfg| {
        cfg.check().map_err(Failure::Config)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Failure::Config(e.to_string()))?;
        manifest.threads = pool.current_num_threads();
        let validation = validate_params(&cfg.model);
        manifest.validation = Some(validation.clone());
        let exponents = feasible_sets(&cfg);
        manifest.exponents = exponents.clone();
        let mut ctx = Context {
            cfg,
            validation,
            exponents,
            stdout: Vec::new(),
        };
        let res = pool.install(|| dispatch(cmd, &mut ctx));
        stdout = std::mem::take(&mut ctx.stdout);
        res
    });

    let result = result.and_then(|artifacts| {
        let dir = out_dir
            .clone()
            .expect("a parsed config names an output directory");
        write_artifacts(&dir, &artifacts)
    });
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    let exit_code = match result {
        Ok(records) => {
            manifest.status = Status::Ok;
            manifest.outputs = records;
            EXIT_OK
        }
        Err(f) => {
            manifest.error = Some(f.record());
            f.exit_code()
        }
    };
    if let Some(dir) = &out_dir {
        if let Err(e) = manifest.write(dir) {
            stdout.push(format!("warning: manifest not written: {e}"));
        }
    }
    Outcome {
        exit_code,
        out_dir,
        manifest,
        stdout,
    }
}

fn feasible_sets(cfg: &RunConfig) -> Vec<ExponentSet> {
    let x = cfg.model.ratio();
    let mut out = Vec::new();
    for &alpha in &cfg.exponents.alpha {
        for &q in &cfg.exponents.q {
            if let Ok(e) = feasible_exponents(x, alpha, q) {
                out.push(e);
            }
        }
    }
    out
}

/// Writes every artifact or none: a partial write is rolled back.
fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<OutputRecord>, Failure> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut written = Vec::new();
    let mut records = Vec::new();
    for a in artifacts {
        let path = dir.join(&a.name);
        if let Err(e) = std::fs::write(&path, &a.contents) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(Failure::Io(format!("{}: {e}", path.display())));
        }
        written.push(path);
        records.push(OutputRecord::of(&a.name, a.contents.as_bytes()));
    }
    Ok(records)
}

fn dispatch(cmd: Subcommand, ctx: &mut Context) -> Result<Vec<Artifact>, Failure> {
    let v = &ctx.validation;
    if cmd == Subcommand::Validate {
        ctx.stdout
            .push(format!("x = {:.6}, x* = {:.6}", v.x, v.x_star));
        for c in &v.checks {
            ctx.stdout.push(format!(
                "[{}] {}: {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
    }
    if !v.passed() {
        let failed: Vec<String> = v
            .failures()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        return Err(Failure::Validation(failed.join("; ")));
    }
    match cmd {
        Subcommand::Validate => Ok(Vec::new()),
        Subcommand::SimulatePool => simulate_pool_cmd(&ctx.cfg),
        Subcommand::SolveSpde => solve_spde_cmd(&ctx.cfg),
        Subcommand::DensityBounds => density_bounds_cmd(&ctx.cfg, &ctx.exponents),
        Subcommand::VerifyDelta => verify_delta_cmd(&ctx.cfg),
        Subcommand::Report => report_cmd(&ctx.cfg),
    }
}

fn lineage(cfg: &RunConfig) -> SeedLineage {
    SeedLineage::new(cfg.monte_carlo.base_seed)
}

fn noises(cfg: &RunConfig) -> Result<Vec<NoiseBundle>, Failure> {
    let (dt, n) = (cfg.grid.dt, cfg.n_steps());
    (0..cfg.monte_carlo.n_scenarios as u64)
        .map(|s| {
            NoiseBundle::generate(lineage(cfg), s, dt, n, cfg.model.rho3).map_err(Failure::from)
        })
        .collect()
}

fn spde_options(cfg: &RunConfig) -> SpdeOptions {
    SpdeOptions {
        scheme: cfg.spde.scheme,
        record_every: (cfg.n_steps() / cfg.grid.snapshots).max(1),
        rho: cfg.spde.rho,
        max_substeps: cfg.spde.max_substeps,
        ..Default::default()
    }
}

fn pool_options(cfg: &RunConfig) -> PoolOptions {
    PoolOptions {
        absorption: cfg.absorption,
        snapshot_steps: vec![cfg.n_steps()],
    }
}

fn density_table(grid: &lpsv_core::TensorGrid, values: &[f64]) -> Table {
    let mut t = Table::new(&[
        ("x", "distance"),
        ("y", "variance"),
        ("density", "1/(distance*variance)"),
    ]);
    for i in 0..grid.nx_nodes() {
        for j in 0..grid.ny_nodes() {
            t.push(vec![
                grid.x(i).into(),
                grid.y(j).into(),
                values[grid.idx(i, j)].into(),
            ]);
        }
    }
    t
}

fn simulate_pool_cmd(cfg: &RunConfig) -> Result<Vec<Artifact>, Failure> {
    let grid = cfg.tensor_grid()?;
    let per: Vec<(Table, Table)> = noises(cfg)?
        .par_iter()
        .map(|noise| {
            let traj = simulate_pool(
                &cfg.model,
                noise,
                cfg.monte_carlo.n_particles,
                &cfg.initial,
                &pool_options(cfg),
            )?;
            let lc = loss_curve(&traj);
            let mut loss = Table::new(&[("t", "yr"), ("loss", "fraction")]);
            for (t, l) in lc.times.iter().zip(&lc.loss) {
                loss.push(vec![(*t).into(), (*l).into()]);
            }
            let emp = empirical_density_2d(traj.last(), &grid, None)?;
            Ok((loss, density_table(&grid, &emp.values)))
        })
        .collect::<lpsv_core::Result<_>>()?;
    let mut out = Vec::new();
    for (s, (loss, dens)) in per.iter().enumerate() {
        out.push(Artifact::csv(format!("loss_s{s:03}.csv"), loss));
        out.push(Artifact::csv(format!("density_s{s:03}.csv"), dens));
    }
    Ok(out)
}

fn solve_spde_cmd(cfg: &RunConfig) -> Result<Vec<Artifact>, Failure> {
    let grid = cfg.tensor_grid()?;
    let u0 = cfg.initial.grid_field(&cfg.model, &grid)?;
    let opts = spde_options(cfg);
    let fields = noises(cfg)?
        .par_iter()
        .map(|noise| solve_spde_with(&cfg.model, noise, &grid, &u0, opts))
        .collect::<lpsv_core::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (s, f) in fields.iter().enumerate() {
        let mut snap = Table::new(&[
            ("t", "yr"),
            ("x", "distance"),
            ("y", "variance"),
            ("u", "1/(distance*variance)"),
        ]);
        for (t, u) in f.times.iter().zip(&f.u) {
            for i in 0..grid.nx_nodes() {
                for j in 0..grid.ny_nodes() {
                    snap.push(vec![
                        (*t).into(),
                        grid.x(i).into(),
                        grid.y(j).into(),
                        u[grid.idx(i, j)].into(),
                    ]);
                }
            }
        }
        let mut mass = Table::new(&[
            ("t", "yr"),
            ("mass", "fraction"),
            ("y0_flux", "fraction/yr"),
        ]);
        for (n, (m, q)) in f.mass.iter().zip(&f.y0_flux).enumerate() {
            mass.push(vec![(n as f64 * f.dt).into(), (*m).into(), (*q).into()]);
        }
        out.push(Artifact::csv(format!("field_s{s:03}.csv"), &snap));
        out.push(Artifact::csv(format!("mass_s{s:03}.csv"), &mass));
    }
    Ok(out)
}

fn density_bounds_cmd(cfg: &RunConfig, sets: &[ExponentSet]) -> Result<Vec<Artifact>, Failure> {
    if sets.is_empty() {
        return Err(Failure::Validation(format!(
            "no feasible exponent set for alpha {:?}, q {:?} at x = {}",
            cfg.exponents.alpha,
            cfg.exponents.q,
            cfg.model.ratio()
        )));
    }
    let study = DensityStudy {
        dt: cfg.grid.dt,
        times: cfg.density.times.clone(),
        n_paths: cfg.density.n_paths.unwrap_or(cfg.monte_carlo.n_particles),
        scenarios: (0..cfg.monte_carlo.n_scenarios as u64).collect(),
        bandwidth: None,
        init: cfg.initial.sigma0,
    };
    let panel = run_density_study(&cfg.model, lineage(cfg), &study)?;
    let mut m_tab = Table::new(&[
        ("alpha", ""),
        ("q", ""),
        ("t", "yr"),
        ("scenario", ""),
        ("m_alpha", "variance^alpha/variance"),
    ]);
    let mut fit_tab = Table::new(&[
        ("alpha", ""),
        ("q", ""),
        ("c1", ""),
        ("c2", ""),
        ("fit_rel_residual", ""),
        ("time_integral", "yr"),
    ]);
    let mut ratio_tab = Table::new(&[
        ("alpha", ""),
        ("q", ""),
        ("r_tilde", ""),
        ("t", "yr"),
        ("scenario", ""),
        ("ratio_moment", ""),
        ("std_error", ""),
        ("scaled_ratio_moment", ""),
    ]);
    for e in sets {
        let rep = malpha_report(&panel.times, &panel.densities, e.alpha, e.q);
        for (k, t) in rep.times.iter().enumerate() {
            for (s, m) in rep.m[k].iter().enumerate() {
                m_tab.push(vec![
                    e.alpha.into(),
                    e.q.into(),
                    (*t).into(),
                    s.into(),
                    (*m).into(),
                ]);
            }
        }
        fit_tab.push(vec![
            e.alpha.into(),
            e.q.into(),
            rep.fit.c1.into(),
            rep.fit.c2.into(),
            rep.fit.rel_residual.into(),
            rep.time_integral.into(),
        ]);
        for (k, t) in panel.times.iter().enumerate() {
            for (s, samples) in panel.samples[k].iter().enumerate() {
                let est = ratio_moment_from_samples(samples, e)?;
                ratio_tab.push(vec![
                    e.alpha.into(),
                    e.q.into(),
                    e.r_tilde.into(),
                    (*t).into(),
                    s.into(),
                    est.mean.into(),
                    est.se.into(),
                    (t.powf(e.q * e.r_tilde) * est.mean).into(),
                ]);
            }
        }
    }
    Ok(vec![
        Artifact::csv("malpha.csv", &m_tab),
        Artifact::csv("malpha_fit.csv", &fit_tab),
        Artifact::csv("ratio_moment.csv", &ratio_tab),
    ])
}

fn verify_delta_cmd(cfg: &RunConfig) -> Result<Vec<Artifact>, Failure> {
    let grid = cfg.tensor_grid()?;
    let u0 = cfg.initial.grid_field(&cfg.model, &grid)?;
    let spec = DeltaSpec {
        mollifier: MollifierSpec {
            epsilon: cfg.verify.epsilon,
        },
        delta: cfg.exponents.delta,
        n_s: cfg.verify.n_s.unwrap_or(cfg.grid.n_y),
    };
    let report = delta_identity_streaming(
        &cfg.model,
        &noises(cfg)?,
        &grid,
        &u0,
        spde_options(cfg),
        &spec,
    )?;
    let names: Vec<&str> = report.averaged.named().iter().map(|(n, _)| *n).collect();
    let mut cols: Vec<(&str, &str)> = vec![("scenario", "")];
    cols.extend(names.iter().map(|n| (*n, "density^2")));
    cols.push(("relative_residual", ""));
    let mut tab = Table::new(&cols);
    let row = |label: Cell, d: &lpsv_core::verify::DeltaTerms| {
        let mut r = vec![label];
        r.extend(d.named().into_iter().map(|(_, v)| Cell::from(v)));
        r.push(d.relative_residual().into());
        r
    };
    for (s, d) in report.pathwise.iter().enumerate() {
        tab.push(row(s.into(), d));
    }
    tab.push(row("mean".into(), &report.averaged));
    let mut summary = Table::new(&[("quantity", ""), ("value", "")]);
    for (k, v) in [
        ("t", report.t),
        ("delta", report.delta),
        (
            "max_relative_pathwise_residual",
            report.max_relative_pathwise_residual(),
        ),
        (
            "mean_relative_pathwise_residual",
            report.mean_relative_pathwise_residual(),
        ),
        (
            "averaged_relative_residual",
            report.averaged.relative_residual(),
        ),
        ("mean_stoch_w0", report.mean_stochastic[0]),
        ("mean_stoch_b0", report.mean_stochastic[1]),
    ] {
        summary.push(vec![k.into(), v.into()]);
    }
    Ok(vec![
        Artifact::csv("delta_terms.csv", &tab),
        Artifact::csv("delta_summary.csv", &summary),
    ])
}

fn report_cmd(cfg: &RunConfig) -> Result<Vec<Artifact>, Failure> {
    let grid = cfg.tensor_grid()?;
    let u0 = cfg.initial.grid_field(&cfg.model, &grid)?;
    let opts = spde_options(cfg);
    let alphas = &cfg.exponents.alpha;
    let horizon = cfg.n_steps() as f64 * cfg.grid.dt;
    type PerScenario = (Vec<lpsv_core::verify::NormReport>, f64, f64, f64);
    let per: Vec<PerScenario> = noises(cfg)?
        .par_iter()
        .map(|noise| {
            let field = solve_spde_with(&cfg.model, noise, &grid, &u0, opts)?;
            let norms = alphas.iter().map(|&a| weighted_norms(&field, a)).collect();
            let traj = simulate_pool(
                &cfg.model,
                noise,
                cfg.monte_carlo.n_particles,
                &cfg.initial,
                &pool_options(cfg),
            )?;
            let emp = empirical_density_2d(traj.last(), &grid, None)?;
            let dist = compare_particle_grid(&emp, &field, horizon)?;
            let lost = field.mass[0] - field.mass.last().copied().unwrap_or(0.0);
            let loss = loss_curve(&traj).loss.last().copied().unwrap_or(0.0);
            Ok((norms, dist, lost, loss))
        })
        .collect::<lpsv_core::Result<_>>()?;
    let n = per.len() as f64;
    let mut norms = Table::new(&[
        ("alpha", ""),
        ("L_alpha", "density^2*variance^alpha"),
        ("H_alpha", "density^2*variance^alpha"),
        ("uy_norm_alpha", "density^2*variance^(alpha-2)"),
        ("boundary_ratio", ""),
    ]);
    let mut profile = Table::new(&[
        ("alpha", ""),
        ("x", "distance"),
        ("profile", "density^2*variance^(alpha+1)"),
    ]);
    for (k, &a) in alphas.iter().enumerate() {
        let mean = |f: fn(&lpsv_core::verify::NormReport) -> f64| {
            per.iter().map(|p| f(&p.0[k])).sum::<f64>() / n
        };
        let prof: Vec<(f64, f64)> = (0..grid.nx_nodes())
            .map(|i| {
                let x = per[0].0[k].boundary_profile[i].0;
                (
                    x,
                    per.iter()
                        .map(|p| p.0[k].boundary_profile[i].1)
                        .sum::<f64>()
                        / n,
                )
            })
            .collect();
        let peak = prof.iter().map(|p| p.1).fold(0.0, f64::max);
        let ratio = if peak > 0.0 { prof[1].1 / peak } else { 0.0 };
        norms.push(vec![
            a.into(),
            mean(|r| r.l_alpha).into(),
            mean(|r| r.h_alpha).into(),
            mean(|r| r.uy_norm_alpha).into(),
            ratio.into(),
        ]);
        for (x, v) in prof {
            profile.push(vec![a.into(), x.into(), v.into()]);
        }
    }
    let mut cmp = Table::new(&[
        ("scenario", ""),
        ("sup_cdf_distance", ""),
        ("spde_lost_mass", "fraction"),
        ("pool_loss", "fraction"),
    ]);
    for (s, p) in per.iter().enumerate() {
        cmp.push(vec![s.into(), p.1.into(), p.2.into(), p.3.into()]);
    }
    Ok(vec![
        Artifact::csv("norms.csv", &norms),
        Artifact::csv("boundary_profile.csv", &profile),
        Artifact::csv("comparison.csv", &cmp),
    ])
}
