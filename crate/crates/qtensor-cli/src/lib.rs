//! Batch front-end for the `qtensor` binary.

pub mod config;
pub mod emit;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qtensor_core::dynamics::{energy_csv, relax, ClosureTable, FieldState, Simulation};
use qtensor_core::equilibrium::{
    bulk_energy, find_minimizer, hessian_spectrum, verify_manifold, BulkCoefficients, Minimizer,
};
use qtensor_core::limit::{epsilon_sweep, modulated_field, well_prepared, LimitLab};
use qtensor_core::so3::{default_rule, haar_rotation};
use qtensor_core::tensor::{Frame, QPair};
use qtensor_core::{fmt_g17, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{load_config, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "qtensor", version, about = "Two-tensor biaxial nematic hydrodynamics")]
struct Cli {
    /// TOML run configuration; all keys are optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to QT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format of the report file.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Coefficients {
    /// Quadratic bulk coefficient
    #[arg(long, allow_hyphen_values = true)]
    c02: Option<f64>,
    /// Cubic bulk coefficient
    #[arg(long, allow_hyphen_values = true)]
    c03: Option<f64>,
    /// Quartic bulk coefficient
    #[arg(long, allow_hyphen_values = true)]
    c04: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lowest stationary point of the bulk energy.
    Minimize(Coefficients),
    /// Hessian eigenvalues and kernel at the minimizer.
    Spectrum(Coefficients),
    /// Fill and check the closure lattice around the minimizer.
    ClosureTable,
    /// Homogeneous relaxation toward the minimizer.
    Relax,
    /// Periodic 2D simulation with an energy log.
    Simulate,
    /// ε-sweep from well-prepared data.
    Sweep {
        /// Comma-separated, descending.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        eps: Option<Vec<f64>>,
    },
    /// Check that the minimizer set is a nondegenerate 3-dim manifold.
    Verify(Coefficients),
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("i/o error: {e}"))
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    format: Format,
}

impl Context {
    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn report<T: Serialize>(&self, stem: &str, report: &T) -> Result<PathBuf, Failure> {
        match self.format {
            Format::Json => self.write(&format!("{stem}.json"), &emit::to_json(report)),
            Format::Csv => self.write(&format!("{stem}.csv"), &emit::to_csv(report)),
        }
    }

    fn bulk(&self, c: &Coefficients) -> BulkCoefficients {
        let mut b = self.cfg.sim.bulk;
        b.c02 = c.c02.unwrap_or(b.c02);
        b.c03 = c.c03.unwrap_or(b.c03);
        b.c04 = c.c04.unwrap_or(b.c04);
        b
    }

    fn minimizer(&self, bulk: &BulkCoefficients) -> Result<Minimizer, Failure> {
        bulk.validate()?;
        Ok(find_minimizer(bulk, default_rule(), self.cfg.sim.minimizer_starts, self.cfg.seed)?)
    }
}

/// Runs the CLI on `args` (program name first), printing the summary or error, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (code, message) = invoke(args);
    match code {
        0 => println!("{message}"),
        _ => eprintln!("{message}"),
    }
    code
}

/// Like [`run`] but returns the message instead of printing it.
pub fn invoke<I, T>(args: I) -> (i32, String)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => return (if e.use_stderr() { 1 } else { 0 }, e.render().to_string().trim_end().to_string()),
    };
    match execute(cli) {
        Ok(summary) => (0, summary),
        Err(Failure::Usage(msg)) => (1, format!("error: {msg}")),
        Err(Failure::Numerical(msg)) => (2, format!("numerical failure: {msg}")),
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("QT_THREADS") {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("QT_THREADS must be a positive integer (got {s:?})"))),
        _ => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<String, Failure> {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // A pool set up by an earlier call in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => load_config(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", cli.out.display())))?;
    let ctx = Context { cfg, out: cli.out, format: cli.format };
    match cli.command {
        Command::Minimize(c) => minimize(&ctx, &c),
        Command::Spectrum(c) => spectrum(&ctx, &c),
        Command::ClosureTable => closure_table(&ctx),
        Command::Relax => relax_cmd(&ctx),
        Command::Simulate => simulate(&ctx),
        Command::Sweep { eps } => sweep(ctx, eps),
        Command::Verify(c) => verify(&ctx, &c),
    }
}

#[derive(Serialize)]
struct MinimizeReport {
    coefficients: BulkCoefficients,
    s1: f64,
    b1: f64,
    s2: f64,
    b2: f64,
    frame: Frame,
    q: [f64; 10],
    q_norm: f64,
    energy: f64,
    gradient_norm: f64,
    commutator: f64,
    uniaxial: bool,
}

fn minimize(ctx: &Context, c: &Coefficients) -> Result<String, Failure> {
    let bulk = ctx.bulk(c);
    let m = ctx.minimizer(&bulk)?;
    let q = m.form.to_qpair();
    let f = m.form;
    let report = MinimizeReport {
        coefficients: bulk,
        s1: f.s1,
        b1: f.b1,
        s2: f.s2,
        b2: f.b2,
        frame: f.frame,
        q: q.to_array(),
        q_norm: q.norm(),
        energy: m.energy,
        gradient_norm: m.gradient_norm,
        commutator: m.commutator,
        uniaxial: f.b1.abs() < 1e-8 && f.b2.abs() < 1e-8,
    };
    let path = ctx.report("minimize", &report)?;
    Ok(format!(
        "minimize: (s1, b1, s2, b2) = ({}, {}, {}, {}), |Q| = {}, energy = {} -> {}",
        fmt_g17(f.s1),
        fmt_g17(f.b1),
        fmt_g17(f.s2),
        fmt_g17(f.b2),
        fmt_g17(report.q_norm),
        fmt_g17(m.energy),
        path.display()
    ))
}

#[derive(Serialize)]
struct SpectrumReport {
    coefficients: BulkCoefficients,
    s1: f64,
    b1: f64,
    s2: f64,
    b2: f64,
    eigenvalues: [f64; 10],
    kernel_dim: usize,
    smallest_positive: Option<f64>,
    xi_angle: f64,
    xi_residual: f64,
}

fn spectrum(ctx: &Context, c: &Coefficients) -> Result<String, Failure> {
    let bulk = ctx.bulk(c);
    let m = ctx.minimizer(&bulk)?;
    let s = hessian_spectrum(&m.form, &bulk, default_rule(), 1e-6)?;
    let report = SpectrumReport {
        coefficients: bulk,
        s1: m.form.s1,
        b1: m.form.b1,
        s2: m.form.s2,
        b2: m.form.b2,
        eigenvalues: s.eigenvalues,
        kernel_dim: s.kernel_dim,
        smallest_positive: s.smallest_positive(),
        xi_angle: s.xi_angle,
        xi_residual: s.xi_residual,
    };
    let path = ctx.report("spectrum", &report)?;
    Ok(format!(
        "spectrum: kernel_dim = {}, smallest positive = {} -> {}",
        s.kernel_dim,
        report.smallest_positive.map_or("none".into(), fmt_g17),
        path.display()
    ))
}

fn verify(ctx: &Context, c: &Coefficients) -> Result<String, Failure> {
    let bulk = ctx.bulk(c);
    bulk.validate()?;
    let report = verify_manifold(&bulk, default_rule(), ctx.cfg.sim.minimizer_starts, ctx.cfg.seed)?;
    let path = ctx.report("verify", &report)?;
    let line = format!(
        "verify: pass = {}, kernel_dim = {}, xi_angle = {} -> {}",
        report.pass,
        report.kernel_dim,
        fmt_g17(report.xi_angle),
        path.display()
    );
    if report.pass {
        Ok(line)
    } else {
        Err(Failure::Numerical(line))
    }
}

#[derive(Serialize)]
struct TableReport {
    route: String,
    spacing: f64,
    origin: [f64; 4],
    anchor: [f64; 4],
    nodes: usize,
    samples: usize,
    offset: f64,
    max_relative_error: f64,
}

fn closure_table(ctx: &Context) -> Result<String, Failure> {
    let sim = &ctx.cfg.sim;
    let m = ctx.minimizer(&sim.bulk)?;
    let table = ClosureTable::new(m.form.scalars(), sim.table_spacing, sim.closure_route, sim.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let base = m.form.to_qpair();
    let st = &ctx.cfg.table;
    let samples: Vec<QPair> = (0..st.samples)
        .map(|_| {
            let r = haar_rotation(&mut rng);
            let mut d = [0.0; 10];
            for x in d.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            let d = QPair::from_array(&d);
            let n = d.norm().max(1e-300);
            base.rotate(&r) + d * (st.offset / n)
        })
        .collect();
    let err = table.validate(&samples)?;
    let nodes = table.nodes();
    let mut csv = String::from("k1,k2,k3,k4,s1,b1,s2,b2");
    if let Some((_, _, vals)) = nodes.first() {
        for i in 0..vals.len() {
            csv.push_str(&format!(",v{i}"));
        }
    }
    csv.push('\n');
    for (key, s, vals) in &nodes {
        let mut row: Vec<String> = key.iter().map(|k| k.to_string()).collect();
        row.extend(s.iter().chain(vals.iter()).map(|x| fmt_g17(*x)));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    ctx.write("table.csv", &csv)?;
    let report = TableReport {
        route: format!("{:?}", table.route).to_lowercase(),
        spacing: table.spacing,
        origin: table.origin,
        anchor: m.form.scalars(),
        nodes: nodes.len(),
        samples: samples.len(),
        offset: st.offset,
        max_relative_error: err,
    };
    let path = ctx.report("table", &report)?;
    Ok(format!(
        "closure-table: {} nodes, max relative error {} over {} samples -> {}",
        nodes.len(),
        fmt_g17(err),
        samples.len(),
        path.display()
    ))
}

#[derive(Serialize)]
struct RelaxReport {
    steps: usize,
    dt: f64,
    initial_energy: f64,
    final_energy: f64,
    minimum_energy: f64,
    monotone: bool,
    final_distance: f64,
}

fn relax_cmd(ctx: &Context) -> Result<String, Failure> {
    let sim = &ctx.cfg.sim;
    let m = ctx.minimizer(&sim.bulk)?;
    let r = &ctx.cfg.relax;
    let q0 = m.form.to_qpair() * r.scale;
    let traj = relax(&q0, sim, r.dt, r.steps)?;
    let mut csv = String::from("time,energy,q0,q1,q2,q3,q4,q5,q6,q7,q8,q9\n");
    for (t, q, e) in &traj {
        let mut row = vec![fmt_g17(*t), fmt_g17(*e)];
        row.extend(q.to_array().iter().map(|x| fmt_g17(*x)));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    ctx.write("relax.csv", &csv)?;
    let last = traj.last().expect("trajectory has the initial point");
    let monotone = traj.windows(2).all(|w| w[1].2 <= w[0].2 + 1e-12 * w[0].2.abs().max(1.0));
    let report = RelaxReport {
        steps: r.steps,
        dt: r.dt,
        initial_energy: traj[0].2,
        final_energy: last.2,
        minimum_energy: bulk_energy(&m.form.to_qpair(), &sim.bulk, default_rule())?,
        monotone,
        final_distance: (last.1 - m.form.to_qpair()).norm(),
    };
    let path = ctx.report("relax", &report)?;
    let line = format!(
        "relax: energy {} -> {}, monotone = {} -> {}",
        fmt_g17(report.initial_energy),
        fmt_g17(report.final_energy),
        monotone,
        path.display()
    );
    if monotone {
        Ok(line)
    } else {
        Err(Failure::Numerical(line))
    }
}

#[derive(Serialize)]
struct SimulateReport {
    steps: usize,
    rejected: usize,
    dt: f64,
    initial_energy: f64,
    final_energy: f64,
    energy_residual: f64,
    max_energy_increase_rate: f64,
    monotone: bool,
}

fn initial_state(ctx: &Context, sim: &Simulation) -> Result<FieldState, Failure> {
    let init = &ctx.cfg.initial;
    let mut st = if init.prepared {
        let lab = LimitLab::new(sim)?;
        well_prepared(&lab, init.frame_amplitude, init.velocity_amplitude)?.0
    } else {
        modulated_field(sim, init.frame_amplitude, init.velocity_amplitude).1
    };
    if init.perturbation != 0.0 {
        let g = st.grid;
        let (kx, ky) = (2.0 * std::f64::consts::PI / g.lx, 2.0 * std::f64::consts::PI / g.ly);
        for (i, q) in st.q.iter_mut().enumerate() {
            let (x, y) = g.coords(i);
            let a = init.perturbation * (kx * x).sin() * (ky * y).cos();
            *q = *q + QPair::from_array(&[a; 10]);
        }
    }
    Ok(st)
}

fn simulate(ctx: &Context) -> Result<String, Failure> {
    let sim = Simulation::new(ctx.cfg.sim.clone(), ctx.cfg.seed)?;
    let init = initial_state(ctx, &sim)?;
    let summary = sim.run(&init, |_, _| Ok(()))?;
    ctx.write("energy.csv", &energy_csv(&summary.reports))?;
    let snap = ctx.out.join("final.qt2d");
    let mut buf = Vec::new();
    summary.final_state.write_snapshot(&mut buf)?;
    fs::write(&snap, buf).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", snap.display())))?;
    let rate = summary.max_energy_increase_rate();
    let report = SimulateReport {
        steps: summary.steps,
        rejected: summary.rejected,
        dt: summary.dt,
        initial_energy: summary.reports.first().map_or(f64::NAN, |r| r.total),
        final_energy: summary.reports.last().map_or(f64::NAN, |r| r.total),
        energy_residual: summary.energy_residual(),
        max_energy_increase_rate: rate,
        monotone: rate <= 1e-9,
    };
    let path = ctx.report("simulate", &report)?;
    let line = format!(
        "simulate: {} steps, energy {} -> {}, residual {} -> {}",
        summary.steps,
        fmt_g17(report.initial_energy),
        fmt_g17(report.final_energy),
        fmt_g17(report.energy_residual),
        path.display()
    );
    if report.monotone {
        Ok(line)
    } else {
        Err(Failure::Numerical(line))
    }
}

fn sweep(mut ctx: Context, eps: Option<Vec<f64>>) -> Result<String, Failure> {
    if let Some(e) = eps {
        ctx.cfg.sweep.eps = e;
    }
    ctx.cfg.sweep.validate().map_err(|e| Failure::Usage(format!("sweep: {e}")))?;
    let report = epsilon_sweep(&ctx.cfg.sweep, ctx.cfg.seed)?;
    let path = ctx.report("sweep", &report)?;
    let failed = report.runs.iter().filter(|r| r.failure.is_some()).count();
    let line = format!(
        "sweep: fit_order = {} (R² = {}), {} of {} runs failed -> {}",
        fmt_g17(report.fit_order),
        fmt_g17(report.fit_r2),
        failed,
        report.runs.len(),
        path.display()
    );
    if failed == 0 && report.fit_order.is_finite() {
        Ok(line)
    } else {
        Err(Failure::Numerical(line))
    }
}

