//! Acceptance criteria for the library and the CLI.
//!
//! Criteria that go through the command-line front-end call it in-process and keep a log of
//! every invocation so that the determinism check can replay them.

pub mod consistency;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qtensor_cli::config::{load_config, to_toml};
use serde_json::Value;

/// Verdict of one criterion with a one-line account of the measured values.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self { pass: false, detail: detail.into() }
    }
}

pub const TITLES: [&str; 10] = [
    "reference minimizer and spectrum",
    "kernel spanned by rotation tangents",
    "conjugate round trip",
    "convexity and positivity",
    "derivative consistency",
    "energy dissipation",
    "small-epsilon limit",
    "frame-equation residual",
    "uniaxial kernel",
    "determinism",
];

/// One CLI call and where it wrote its files.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub args: Vec<String>,
    pub out: PathBuf,
    pub code: i32,
    /// Summary line or error message.
    pub message: String,
}

struct SweepResult {
    code: i32,
    seconds: f64,
    report: Option<Value>,
}

/// Scratch directory, configuration location and the log of CLI calls.
pub struct Session {
    root: tempfile::TempDir,
    configs: PathBuf,
    log: Vec<Invocation>,
    sweep: Option<SweepResult>,
}

impl Session {
    pub fn new(configs: &Path) -> std::io::Result<Self> {
        Ok(Self { root: tempfile::tempdir()?, configs: configs.to_path_buf(), log: Vec::new(), sweep: None })
    }

    fn config(&self, name: &str) -> String {
        self.configs.join(name).to_string_lossy().into_owned()
    }

    fn call(&self, tag: &str, args: &[String]) -> Invocation {
        let out = self.root.path().join(tag);
        let mut argv = vec!["qtensor".to_string()];
        argv.extend(args.iter().cloned());
        argv.push("--out".into());
        argv.push(out.to_string_lossy().into_owned());
        let (code, message) = qtensor_cli::invoke(argv);
        Invocation { args: args.to_vec(), out, code, message }
    }

    /// Runs the CLI with its output in a fresh subdirectory and logs the call.
    pub fn invoke(&mut self, args: &[&str]) -> Invocation {
        let tag = format!("run{:02}", self.log.len());
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let inv = self.call(&tag, &args);
        self.log.push(inv.clone());
        inv
    }

    fn scratch(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn sweep(&mut self) -> &SweepResult {
        if self.sweep.is_none() {
            let cfg = self.config("sweep.toml");
            let t = Instant::now();
            let inv = self.call("sweep", &["sweep".into(), "--config".into(), cfg]);
            let report = read_json(&inv.out.join("sweep.json")).ok();
            self.sweep = Some(SweepResult { code: inv.code, seconds: t.elapsed().as_secs_f64(), report });
        }
        self.sweep.as_ref().expect("sweep was run")
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// A float field; null (NaN on output) and missing keys read as NaN.
fn num(v: &Value, key: &str) -> f64 {
    v.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn report(inv: &Invocation, file: &str) -> Result<Value, String> {
    if inv.code != 0 {
        return Err(format!("`qtensor {}` exited with {}: {}", inv.args.join(" "), inv.code, inv.message));
    }
    read_json(&inv.out.join(file))
}

/// Evaluates criterion `n` (1-based).
pub fn evaluate(n: usize, s: &mut Session) -> Outcome {
    let t = Instant::now();
    let result = match n {
        1 => reference_minimizer(s, &t),
        2 => kernel_structure(s, &t),
        3 => consistency::conjugate_round_trip(100, 3).map_err(|e| e.to_string()).map(|o| with_limit(o, &t, 60.0)),
        4 => consistency::convexity_suite(200, 50, 4).map_err(|e| e.to_string()).map(|o| with_limit(o, &t, 300.0)),
        5 => consistency::derivative_consistency(5, 5).map_err(|e| e.to_string()),
        6 => dissipation(s, &t),
        7 => small_epsilon_limit(s),
        8 => frame_residual(s),
        9 => uniaxial(s),
        10 => determinism(s),
        _ => Err(format!("no criterion {n}")),
    };
    result.unwrap_or_else(Outcome::fail)
}

fn with_limit(mut o: Outcome, t: &Instant, limit: f64) -> Outcome {
    let secs = t.elapsed().as_secs_f64();
    o.pass &= secs <= limit;
    o.detail.push_str(&format!("; runtime {secs:.1} s (≤ {limit} s)"));
    o
}

fn reference_minimizer(s: &mut Session, t: &Instant) -> Result<Outcome, String> {
    let cfg = s.config("reference_biaxial.toml");
    let m = report(&s.invoke(&["minimize", "--config", &cfg]), "minimize.json")?;
    let sp = report(&s.invoke(&["spectrum", "--config", &cfg]), "spectrum.json")?;
    let got = [num(&m, "s1"), num(&m, "b1"), num(&m, "s2"), num(&m, "b2")];
    let want = [0.6263, -0.0526, -0.2377, 0.2890];
    let dev = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let eig: Vec<f64> = sp["eigenvalues"].as_array().ok_or("spectrum has no eigenvalues")?.iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect();
    let zeros = eig.iter().filter(|l| l.abs() < 1e-6).count();
    let lam = num(&sp, "smallest_positive");
    let pass = dev <= 5e-3 && zeros == 3 && (lam - 8.4870).abs() <= 1e-2;
    let o = Outcome::new(
        pass,
        format!(
            "(s1, b1, s2, b2) = ({:.4}, {:.4}, {:.4}, {:.4}), max deviation from (0.6263, -0.0526, -0.2377, 0.2890) {dev:.2e} (≤ 5e-3); \
             {zeros} eigenvalues with |λ| < 1e-6 (= 3); smallest positive {lam:.4} (8.4870 ± 1e-2)",
            got[0], got[1], got[2], got[3]
        ),
    );
    Ok(with_limit(o, t, 10.0))
}

fn kernel_structure(s: &mut Session, t: &Instant) -> Result<Outcome, String> {
    let cfg = s.config("reference_biaxial.toml");
    let v = report(&s.invoke(&["verify", "--config", &cfg]), "verify.json")?;
    let (res, angle) = (num(&v, "xi_residual"), num(&v, "xi_angle"));
    let o = Outcome::new(
        res <= 1e-8 && angle < 1e-5 && v["kernel_dim"] == 3,
        format!(
            "max |Hξ|/(|H||ξ|) = {res:.2e} (≤ 1e-8), subspace angle {angle:.2e} rad (< 1e-5), kernel_dim {}",
            v["kernel_dim"]
        ),
    );
    Ok(with_limit(o, t, 5.0))
}

fn dissipation(s: &mut Session, t: &Instant) -> Result<Outcome, String> {
    let base = s.config("dissipation.toml");
    let a = report(&s.invoke(&["simulate", "--config", &base]), "simulate.json")?;
    let dt = num(&a, "dt");
    // Slightly above dt/2 so that each output interval takes exactly twice the steps.
    let mut cfg = load_config(Path::new(&base))?;
    cfg.sim.dt = Some(0.5 * dt * (1.0 + 1e-9));
    let half = s.scratch("dissipation_half.toml");
    fs::write(&half, to_toml(&cfg)).map_err(|e| e.to_string())?;
    let b = report(&s.invoke(&["simulate", "--config", &half.to_string_lossy()]), "simulate.json")?;
    let (ra, rb) = (num(&a, "energy_residual"), num(&b, "energy_residual"));
    let ratio = ra.abs() / rb.abs();
    let rate = num(&a, "max_energy_increase_rate").max(num(&b, "max_energy_increase_rate"));
    let o = Outcome::new(
        rate <= 1e-9 && ratio >= 8.0,
        format!(
            "dt {dt:.4e}: {} steps, residual {ra:.3e}; dt/2: {} steps, residual {rb:.3e}; ratio {ratio:.2} (≥ 8); \
             max energy increase rate {rate:.3e} (≤ 1e-9); rejected steps {} and {}",
            a["steps"], b["steps"], a["rejected"], b["rejected"]
        ),
    );
    Ok(with_limit(o, t, 600.0))
}

fn sweep_runs(v: &Value) -> Vec<&Value> {
    v["runs"].as_array().map(|a| a.iter().collect()).unwrap_or_default()
}

fn small_epsilon_limit(s: &mut Session) -> Result<Outcome, String> {
    let sw = s.sweep();
    let v = sw.report.as_ref().ok_or(format!("sweep wrote no report (exit {})", sw.code))?;
    let runs = sweep_runs(v);
    let failed: Vec<String> =
        runs.iter().filter_map(|r| r["failure"].as_str().map(|f| format!("ε = {}: {f}", num(r, "eps")))).collect();
    let (order, r2) = (num(v, "fit_order"), num(v, "fit_r2"));
    let (q1_order, q1_r2) = (num(v, "q1_order"), num(v, "q1_r2"));
    let ratio = num(v, "frak_e_ratio");
    let pass = failed.is_empty()
        && (0.8..=1.2).contains(&order)
        && r2 >= 0.95
        && q1_order >= 0.8
        && q1_r2 >= 0.95
        && ratio <= 2.0
        && sw.seconds <= 1800.0;
    let dists: Vec<String> = runs.iter().map(|r| format!("{:.3e}", num(r, "sup_dist"))).collect();
    let mut detail = format!(
        "sup distance [{}]: order {order:.3} (0.8..1.2), R² {r2:.4} (≥ 0.95); q1_perp error order {q1_order:.3} (≥ 0.8), \
         R² {q1_r2:.4}; remainder energy max/first {ratio:.3} (≤ 2); runtime {:.0} s (≤ 1800 s)",
        dists.join(", "),
        sw.seconds
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failed runs: {}", failed.join("; ")));
    }
    Ok(Outcome::new(pass, detail))
}

fn frame_residual(s: &mut Session) -> Result<Outcome, String> {
    let sw = s.sweep();
    let v = sw.report.as_ref().ok_or(format!("sweep wrote no report (exit {})", sw.code))?;
    let runs = sweep_runs(v);
    let find = |e: f64| runs.iter().find(|r| (num(r, "eps") - e).abs() < 1e-12 && r["failure"].is_null());
    let (Some(coarse), Some(fine)) = (find(0.1), find(0.025)) else {
        return Err("the sweep has no successful ε = 0.1 and ε = 0.025 runs".into());
    };
    let l2 = |r: &Value| -> Vec<f64> {
        r["frame_res_l2"].as_array().map(|a| a.iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect()).unwrap_or_default()
    };
    let (a, b) = (l2(coarse), l2(fine));
    if a.len() != 3 || b.len() != 3 {
        return Err("frame residuals missing from the sweep report".into());
    }
    let ratios: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x / y).collect();
    Ok(Outcome::new(
        ratios.iter().all(|r| *r >= 4.0),
        format!(
            "L² residuals at ε = 0.1 [{:.3e}, {:.3e}, {:.3e}], at ε = 0.025 [{:.3e}, {:.3e}, {:.3e}]; ratios [{:.3}, {:.3}, {:.3}] (≥ 4)",
            a[0], a[1], a[2], b[0], b[1], b[2], ratios[0], ratios[1], ratios[2]
        ),
    ))
}

fn uniaxial(s: &mut Session) -> Result<Outcome, String> {
    let cfg = s.config("uniaxial.toml");
    let m = report(&s.invoke(&["minimize", "--config", &cfg]), "minimize.json")?;
    let sp = report(&s.invoke(&["spectrum", "--config", &cfg]), "spectrum.json")?;
    let (b1, b2) = (num(&m, "b1"), num(&m, "b2"));
    Ok(Outcome::new(
        m["uniaxial"] == true && sp["kernel_dim"] == 2,
        format!(
            "minimizer (s1, b1, s2, b2) = ({:.4}, {b1:.1e}, {:.4}, {b2:.1e}), uniaxial {}; kernel_dim {} (= 2)",
            num(&m, "s1"),
            num(&m, "s2"),
            m["uniaxial"],
            sp["kernel_dim"]
        ),
    ))
}

fn files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let p = e.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        out.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), bytes));
    }
    out.sort();
    Ok(out)
}

/// Replays every logged invocation and compares all output files byte for byte.
fn determinism(s: &mut Session) -> Result<Outcome, String> {
    if s.log.is_empty() {
        let cfg = s.config("reference_biaxial.toml");
        for cmd in ["minimize", "spectrum", "verify", "closure-table", "relax"] {
            s.invoke(&[cmd, "--config", &cfg]);
        }
    }
    let log = s.log.clone();
    let mut mismatched = Vec::new();
    let mut count = 0;
    for (i, inv) in log.iter().enumerate() {
        let again = s.call(&format!("replay{i:02}"), &inv.args);
        let (a, b) = (files(&inv.out)?, files(&again.out)?);
        count += a.len();
        if again.code != inv.code || a != b {
            mismatched.push(format!("`qtensor {}`", inv.args.join(" ")));
        }
    }
    let cmds: Vec<&str> = log.iter().map(|i| i.args[0].as_str()).collect();
    let mut detail = format!("{} invocations replayed ({}), {count} files compared", log.len(), cmds.join(", "));
    if !mismatched.is_empty() {
        detail.push_str(&format!("; differing: {}", mismatched.join(", ")));
    }
    Ok(Outcome::new(mismatched.is_empty(), detail))
}
