//! Two-tensor hydrodynamics: homogeneous relaxation and a doubly periodic
//! pseudo-spectral solver for the coupled Q–velocity system.
//!
//! Fields are three-component and independent of z. The semi-discrete scheme
//! satisfies the energy identity exactly: convection is written in skew form,
//! 𝒩 is the transpose of 𝒱 pointwise, and all derivatives share one set of
//! skew-symmetric Fourier symbols.

pub mod spectral;
pub mod table;

use std::io::{Read, Write};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::closure::{ClosureRoute, PhysicalParams};
use crate::equilibrium::{bulk_energy, bulk_gradient, bulk_hessian, find_minimizer, BulkCoefficients, Minimizer};
use crate::so3::{default_rule, QuadratureRule};
use crate::tensor::{domain_margin, strictly_inside, Mat3, QPair, Vec10};
use crate::{Error, Result};

pub use spectral::{ElasticCoefficients, Grid, Spectral};
pub use table::{direct_operators, reference_form, ClosureTable, LocalOperators};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    ExplicitRk4,
    /// Semi-implicit Euler: viscosity and a constant elastic stabilizer implicit, the rest explicit.
    Imex,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    #[default]
    Table,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub epsilon: f64,
    pub grid: Grid,
    /// Largest step; chosen from a stability estimate when absent.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Number of equal output intervals on [0, t_end].
    pub samples: usize,
    pub params: PhysicalParams,
    pub bulk: BulkCoefficients,
    pub elastic: ElasticCoefficients,
    pub closure_route: ClosureRoute,
    pub closure_mode: ClosureMode,
    pub table_spacing: f64,
    pub integrator: Integrator,
    /// Domain guard: every node must stay δ/2 inside the admissible set.
    pub delta: f64,
    pub minimizer_starts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            grid: Grid::default(),
            dt: None,
            t_end: 1.0,
            samples: 100,
            params: PhysicalParams::default(),
            bulk: BulkCoefficients::default(),
            elastic: ElasticCoefficients::default(),
            closure_route: ClosureRoute::default(),
            closure_mode: ClosureMode::default(),
            table_spacing: 0.02,
            integrator: Integrator::default(),
            delta: 1e-3,
            minimizer_starts: 8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive (got {x})")))
            }
        };
        pos("epsilon", self.epsilon)?;
        pos("t_end", self.t_end)?;
        pos("table_spacing", self.table_spacing)?;
        pos("delta", self.delta)?;
        if let Some(dt) = self.dt {
            pos("dt", dt)?;
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("samples must be at least 1".into()));
        }
        self.grid.validate()?;
        self.params.validate()?;
        self.bulk.validate()?;
        self.elastic.validate()
    }
}

/// Q and velocity per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub grid: Grid,
    pub q: Vec<QPair>,
    pub v: Vec<[f64; 3]>,
    pub time: f64,
}

impl FieldState {
    pub fn uniform(grid: Grid, q: QPair) -> Self {
        Self { grid, q: vec![q; grid.len()], v: vec![[0.0; 3]; grid.len()], time: 0.0 }
    }

    /// Binary snapshot: "QT2D", version, nx, ny, time, then per node 10 Q coordinates and 3 velocity components.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"QT2D")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.grid.nx as u32).to_le_bytes())?;
        w.write_all(&(self.grid.ny as u32).to_le_bytes())?;
        w.write_all(&self.time.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.q.len() * 13 * 8);
        for (q, v) in self.q.iter().zip(&self.v) {
            for x in q.to_array().iter().chain(v.iter()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot; box lengths are taken from `grid`, sizes are checked against it.
    pub fn read_snapshot<R: Read>(r: &mut R, grid: Grid) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..4] != b"QT2D" {
            return Err(Error::InvalidArgument("snapshot magic mismatch".into()));
        }
        let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
        if u(4) != 1 || u(8) != grid.nx || u(12) != grid.ny {
            return Err(Error::InvalidArgument("snapshot version or size mismatch".into()));
        }
        let mut t = [0u8; 8];
        r.read_exact(&mut t)?;
        let mut data = vec![0u8; grid.len() * 13 * 8];
        r.read_exact(&mut data)?;
        let vals: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (q, v) = vals.chunks_exact(13).map(|c| (QPair::from_array(&c[..10]), [c[10], c[11], c[12]])).unzip();
        Ok(Self { grid, q, v, time: f64::from_le_bytes(t) })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub time: f64,
    pub kinetic: f64,
    pub bulk: f64,
    pub elastic: f64,
    pub total: f64,
    /// (μ, ℳμ).
    pub diss_mu: f64,
    /// η‖κ‖².
    pub diss_visc: f64,
    /// (κ, 𝒫κ).
    pub diss_p: f64,
}

impl EnergyReport {
    pub const CSV_HEADER: &'static str = "time,kinetic,bulk,elastic,total,diss_mu,diss_visc,diss_p";

    pub fn dissipation(&self) -> f64 {
        self.diss_mu + self.diss_visc + self.diss_p
    }

    pub fn csv_row(&self) -> String {
        [self.time, self.kinetic, self.bulk, self.elastic, self.total, self.diss_mu, self.diss_visc, self.diss_p]
            .iter()
            .map(|x| crate::fmt_g17(*x))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn energy_csv(reports: &[EnergyReport]) -> String {
    let mut s = String::from(EnergyReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One right-hand-side evaluation.
struct Stage {
    dq: Vec<Vec10>,
    dv: [Vec<f64>; 3],
    diss: [f64; 3],
}

/// Outcome of [`Simulation::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub reports: Vec<EnergyReport>,
    /// ∫₀ᵗ dissipation, integrated alongside the state, at each report time.
    pub dissipated: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    pub dt: f64,
    pub final_state: FieldState,
}

impl RunSummary {
    /// E(T) − E(0) + ∫₀ᵀ dissipation.
    pub fn energy_residual(&self) -> f64 {
        let (a, b) = (self.reports.first(), self.reports.last());
        match (a, b) {
            (Some(a), Some(b)) => b.total - a.total + self.dissipated.last().copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// Largest increase of total energy per unit time between consecutive reports (≤ 0 when monotone).
    pub fn max_energy_increase_rate(&self) -> f64 {
        self.reports
            .windows(2)
            .map(|w| (w[1].total - w[0].total) / (w[1].time - w[0].time))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub struct Simulation {
    pub cfg: SimConfig,
    pub spectral: Spectral,
    pub minimizer: Minimizer,
    table: Option<ClosureTable>,
    rule: &'static QuadratureRule,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation").field("cfg", &self.cfg).field("minimizer", &self.minimizer).finish()
    }
}

fn split(q: &[Vec10]) -> Vec<Vec<f64>> {
    (0..10).map(|c| q.iter().map(|x| x[c]).collect()).collect()
}

impl Simulation {
    pub fn new(cfg: SimConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rule = default_rule();
        let minimizer = find_minimizer(&cfg.bulk, rule, cfg.minimizer_starts, seed)?;
        let spectral = Spectral::new(cfg.grid, &cfg.elastic)?;
        let table = match cfg.closure_mode {
            ClosureMode::Table => Some(ClosureTable::new(
                minimizer.form.scalars(),
                cfg.table_spacing,
                cfg.closure_route,
                cfg.params,
            )?),
            ClosureMode::Direct => None,
        };
        Ok(Self { cfg, spectral, minimizer, table, rule })
    }

    pub fn rule(&self) -> &'static QuadratureRule {
        self.rule
    }

    pub fn table(&self) -> Option<&ClosureTable> {
        self.table.as_ref()
    }

    pub fn operators(&self, q: &[QPair]) -> Result<Vec<LocalOperators>> {
        match &self.table {
            Some(t) => t.local_many(q),
            None => q.par_iter().map(|x| direct_operators(x, self.cfg.closure_route, &self.cfg.params)).collect(),
        }
    }

    /// 𝒢(Q) per node.
    pub fn elastic_force(&self, q: &[QPair]) -> Vec<QPair> {
        let qv: Vec<Vec10> = q.iter().map(QPair::to_vec).collect();
        let hats: Vec<_> = split(&qv).iter().map(|f| self.spectral.forward(f)).collect();
        self.elastic_from_hats(&hats).iter().map(QPair::from_vec).collect()
    }

    fn elastic_from_hats(&self, hats: &[Vec<Complex64>]) -> Vec<Vec10> {
        let g: Vec<Vec<f64>> =
            self.spectral.apply_elastic(hats).into_iter().map(|h| self.spectral.inverse(h)).collect();
        (0..self.cfg.grid.len()).map(|i| Vec10::from_fn(|c, _| g[c][i])).collect()
    }

    fn bulk_gradients(&self, q: &[QPair]) -> Result<Vec<Vec10>> {
        q.par_iter()
            .enumerate()
            .map(|(i, x)| {
                bulk_gradient(x, &self.cfg.bulk, self.rule)
                    .map(|g| g.to_vec())
                    .map_err(|e| Error::OutOfDomain(format!("node {i}: {e}")))
            })
            .collect()
    }

    /// μ_Q = ε⁻¹𝒥(Q) + 𝒢(Q) per node.
    pub fn chemical_potential(&self, q: &[QPair]) -> Result<Vec<QPair>> {
        let j = self.bulk_gradients(q)?;
        let g = self.elastic_force(q);
        Ok(j.iter().zip(&g).map(|(a, b)| QPair::from_vec(a) * (1.0 / self.cfg.epsilon) + *b).collect())
    }

    /// Kinetic, bulk and elastic energies.
    pub fn energies(&self, state: &FieldState) -> Result<(f64, f64, f64)> {
        let area = self.cfg.grid.cell_area();
        let kinetic = 0.5 * area * state.v.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
        let fb: Vec<f64> = state
            .q
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                bulk_energy(x, &self.cfg.bulk, self.rule).map_err(|e| Error::OutOfDomain(format!("node {i}: {e}")))
            })
            .collect::<Result<_>>()?;
        let bulk = area / self.cfg.epsilon * fb.iter().sum::<f64>();
        let g = self.elastic_force(&state.q);
        let elastic = 0.5 * area * state.q.iter().zip(&g).map(|(a, b)| a.dot(b)).sum::<f64>();
        Ok((kinetic, bulk, elastic))
    }

    pub fn total_energy(&self, state: &FieldState) -> Result<f64> {
        let (k, b, e) = self.energies(state)?;
        Ok(k + b + e)
    }

    pub fn energy_report(&self, state: &FieldState) -> Result<EnergyReport> {
        let (kinetic, bulk, elastic) = self.energies(state)?;
        let q: Vec<Vec10> = state.q.iter().map(QPair::to_vec).collect();
        let s = self.evaluate(&q, &state.v, true)?;
        Ok(EnergyReport {
            time: state.time,
            kinetic,
            bulk,
            elastic,
            total: kinetic + bulk + elastic,
            diss_mu: s.diss[0],
            diss_visc: s.diss[1],
            diss_p: s.diss[2],
        })
    }

    /// Right-hand side of the coupled system; `viscous` includes ηΔv.
    fn evaluate(&self, q: &[Vec10], v: &[[f64; 3]], viscous: bool) -> Result<Stage> {
        let sp = &self.spectral;
        let n = self.cfg.grid.len();
        let eps = self.cfg.epsilon;
        let eta = self.cfg.params.eta;
        let q_hat: Vec<_> = split(q).iter().map(|f| sp.forward(f)).collect();
        let dq: [Vec<Vec<f64>>; 2] = std::array::from_fn(|a| q_hat.iter().map(|h| sp.deriv_real(h, a)).collect());
        let g = self.elastic_from_hats(&q_hat);
        let qp: Vec<QPair> = q.iter().map(QPair::from_vec).collect();
        let j = self.bulk_gradients(&qp)?;
        let v_hat: [_; 3] = std::array::from_fn(|i| sp.forward(&v.iter().map(|x| x[i]).collect::<Vec<_>>()));
        // dv[i][a] = ∂_a v_i
        let dv: [[Vec<f64>; 2]; 3] = std::array::from_fn(|i| std::array::from_fn(|a| sp.deriv_real(&v_hat[i], a)));
        let ops = self.operators(&qp)?;

        struct Node {
            dq: Vec10,
            sigma: [[f64; 2]; 3],
            force: [f64; 3],
            vv: [[f64; 3]; 2],
            diss: [f64; 3],
        }
        let nodes: Vec<Node> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mu = j[i] / eps + g[i];
                let grad = [Vec10::from_fn(|c, _| dq[0][c][i]), Vec10::from_fn(|c, _| dq[1][c][i])];
                let kappa = Mat3::from_fn(|r, c| if c < 2 { dv[r][c][i] } else { 0.0 });
                let op = &ops[i];
                let m_mu = op.apply_m(&mu);
                let v_k = op.apply_v(&kappa);
                let p_k = op.apply_p(&kappa);
                let sigma_m = p_k + op.apply_n(&mu);
                let vi = v[i];
                let dqi = -(grad[0] * vi[0] + grad[1] * vi[1]) - m_mu + v_k;
                let mut force = [0.0; 3];
                for (r, f) in force.iter_mut().enumerate() {
                    let conv = vi[0] * kappa[(r, 0)] + vi[1] * kappa[(r, 1)];
                    *f = -0.5 * conv + if r < 2 { mu.dot(&grad[r]) } else { 0.0 };
                }
                Node {
                    dq: dqi,
                    sigma: std::array::from_fn(|r| [sigma_m[(r, 0)], sigma_m[(r, 1)]]),
                    force,
                    vv: std::array::from_fn(|a| std::array::from_fn(|r| vi[a] * vi[r])),
                    diss: [mu.dot(&m_mu), eta * kappa.norm_squared(), kappa.dot(&p_k)],
                }
            })
            .collect();

        let area = self.cfg.grid.cell_area();
        let mut diss = [0.0; 3];
        for nd in &nodes {
            for k in 0..3 {
                diss[k] += nd.diss[k];
            }
        }
        let diss = diss.map(|d| d * area);

        let mut rhs: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::default(); n]);
        for r in 0..3 {
            let f_hat = sp.forward(&nodes.iter().map(|nd| nd.force[r]).collect::<Vec<_>>());
            let mut acc = f_hat;
            for a in 0..2 {
                let s_hat = sp.forward(&nodes.iter().map(|nd| nd.sigma[r][a]).collect::<Vec<_>>());
                let w_hat = sp.forward(&nodes.iter().map(|nd| nd.vv[a][r]).collect::<Vec<_>>());
                let combo: Vec<Complex64> = s_hat.iter().zip(&w_hat).map(|(s, w)| s - w * 0.5).collect();
                for (x, d) in acc.iter_mut().zip(sp.derivative(&combo, a)) {
                    *x += d;
                }
            }
            if viscous {
                for (idx, x) in acc.iter_mut().enumerate() {
                    *x += v_hat[r][idx] * (eta * sp.laplacian_symbol(idx));
                }
            }
            rhs[r] = acc;
        }
        let [mut rx, mut ry, rz] = rhs;
        sp.leray(&mut rx, &mut ry);
        let dv_out = [sp.inverse(rx), sp.inverse(ry), sp.inverse(rz)];
        Ok(Stage { dq: nodes.iter().map(|nd| nd.dq).collect(), dv: dv_out, diss })
    }

    fn check_domain(&self, q: &[Vec10]) -> Result<()> {
        let half = 0.5 * self.cfg.delta;
        let bad = q.par_iter().position_first(|x| !strictly_inside(&QPair::from_vec(x), half));
        match bad {
            Some(i) => Err(Error::OutOfDomain(format!("node {i} left the admissible set (margin ≤ δ/2)"))),
            None => Ok(()),
        }
    }

    /// One explicit RK4 step; returns the new state and the dissipation integral over the step.
    fn rk4_step(&self, q: &[Vec10], v: &[[f64; 3]], dt: f64) -> Result<(Vec<Vec10>, Vec<[f64; 3]>, f64)> {
        let add = |q0: &[Vec10], v0: &[[f64; 3]], s: &Stage, h: f64| -> (Vec<Vec10>, Vec<[f64; 3]>) {
            let qn = q0.iter().zip(&s.dq).map(|(a, b)| a + b * h).collect();
            let vn = v0
                .iter()
                .enumerate()
                .map(|(i, x)| [x[0] + h * s.dv[0][i], x[1] + h * s.dv[1][i], x[2] + h * s.dv[2][i]])
                .collect();
            (qn, vn)
        };
        let k1 = self.evaluate(q, v, true)?;
        let (q2, v2) = add(q, v, &k1, 0.5 * dt);
        let k2 = self.evaluate(&q2, &v2, true)?;
        let (q3, v3) = add(q, v, &k2, 0.5 * dt);
        let k3 = self.evaluate(&q3, &v3, true)?;
        let (q4, v4) = add(q, v, &k3, dt);
        let k4 = self.evaluate(&q4, &v4, true)?;
        let w = dt / 6.0;
        let qn: Vec<Vec10> = (0..q.len())
            .map(|i| q[i] + (k1.dq[i] + k2.dq[i] * 2.0 + k3.dq[i] * 2.0 + k4.dq[i]) * w)
            .collect();
        let vn: Vec<[f64; 3]> = (0..q.len())
            .map(|i| {
                std::array::from_fn(|r| {
                    v[i][r] + w * (k1.dv[r][i] + 2.0 * k2.dv[r][i] + 2.0 * k3.dv[r][i] + k4.dv[r][i])
                })
            })
            .collect();
        let d = |s: &Stage| s.diss.iter().sum::<f64>();
        let dw = w * (d(&k1) + 2.0 * d(&k2) + 2.0 * d(&k3) + d(&k4));
        Ok((qn, vn, dw))
    }

    /// Largest eigenvalue of ℳ at the minimizer, used by the stabilizer and the step estimate.
    fn m_scale(&self) -> Result<(f64, f64, f64)> {
        let ops = direct_operators(&self.minimizer.form.to_qpair(), self.cfg.closure_route, &self.cfg.params)?;
        let m_max = ops.m_lab().symmetric_eigenvalues().max();
        let p_max = ops.p5_lab().symmetric_eigenvalues().max();
        let v_norm = ops.v_lab().norm();
        Ok((m_max, p_max, v_norm))
    }

    /// Semi-implicit Euler step.
    fn imex_step(&self, q: &[Vec10], v: &[[f64; 3]], dt: f64) -> Result<(Vec<Vec10>, Vec<[f64; 3]>, f64)> {
        let sp = &self.spectral;
        let n = self.cfg.grid.len();
        let (alpha, _, _) = self.m_scale()?;
        let s = self.evaluate(q, v, false)?;
        let f_hat: Vec<_> = split(&s.dq).iter().map(|f| sp.forward(f)).collect();
        let mut inc: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; 10];
        for idx in 0..n {
            let a = nalgebra::SMatrix::<f64, 10, 10>::identity() + sp.elastic_symbol(idx) * (dt * alpha);
            let lu = a.lu();
            let re = lu.solve(&Vec10::from_fn(|c, _| f_hat[c][idx].re)).expect("stabilizer is positive definite");
            let im = lu.solve(&Vec10::from_fn(|c, _| f_hat[c][idx].im)).expect("stabilizer is positive definite");
            for c in 0..10 {
                inc[c][idx] = Complex64::new(re[c], im[c]) * dt;
            }
        }
        let inc: Vec<Vec<f64>> = inc.into_iter().map(|h| sp.inverse(h)).collect();
        let qn: Vec<Vec10> = (0..n).map(|i| q[i] + Vec10::from_fn(|c, _| inc[c][i])).collect();
        let eta = self.cfg.params.eta;
        let mut comps: [Vec<Complex64>; 3] = std::array::from_fn(|r| {
            let vh = sp.forward(&v.iter().map(|x| x[r]).collect::<Vec<_>>());
            let fh = sp.forward(&s.dv[r]);
            vh.iter()
                .zip(&fh)
                .enumerate()
                .map(|(idx, (a, b))| (a + b * dt) / (1.0 - dt * eta * sp.laplacian_symbol(idx)))
                .collect()
        });
        let [cx, cy, _] = &mut comps;
        sp.leray(cx, cy);
        let comps = comps.map(|c| sp.inverse(c));
        let vn = (0..n).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
        // Viscous dissipation is evaluated at the start of the step.
        let visc: f64 = {
            let vh: [_; 3] = std::array::from_fn(|r| sp.forward(&v.iter().map(|x| x[r]).collect::<Vec<_>>()));
            let mut acc = 0.0;
            for h in &vh {
                for a in 0..2 {
                    acc += sp.deriv_real(h, a).iter().map(|x| x * x).sum::<f64>();
                }
            }
            acc * eta * self.cfg.grid.cell_area()
        };
        let dw = dt * (s.diss[0] + s.diss[2] + visc);
        Ok((qn, vn, dw))
    }

    /// A stable step estimate for the explicit scheme.
    pub fn suggest_dt(&self) -> Result<f64> {
        let ops = direct_operators(&self.minimizer.form.to_qpair(), self.cfg.closure_route, &self.cfg.params)?;
        let p_max = ops.p5_lab().symmetric_eigenvalues().max();
        let v_norm = ops.v_lab().norm();
        let l = ops
            .m_lab()
            .cholesky()
            .ok_or_else(|| Error::OutOfDomain("mobility not positive definite at the minimizer".into()))?
            .l();
        let h = bulk_hessian(&self.minimizer.form.to_qpair(), &self.cfg.bulk, self.rule)? / self.cfg.epsilon;
        let h_max = h.symmetric_eigenvalues().max();
        // Largest relaxation rate of ℳ(ℋ/ε + G(k)) over the resolved modes.
        let (relax, g_max) = (0..self.cfg.grid.len())
            .into_par_iter()
            .map(|i| {
                let g = self.spectral.elastic_symbol(i);
                let s = l.transpose() * (h + g) * l;
                (s.symmetric_eigenvalues().max(), g.symmetric_eigenvalues().max())
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
        let k2 = (0..self.cfg.grid.len())
            .map(|i| -self.spectral.laplacian_symbol(i))
            .fold(0.0, f64::max);
        let lam = relax + (self.cfg.params.eta + p_max) * k2 + v_norm * v_norm * (h_max + g_max) * 0.25;
        Ok(0.8 * 2.78 / lam)
    }

    /// Projects the in-plane velocity onto divergence-free fields.
    pub fn project_velocity(&self, v: &mut [[f64; 3]]) {
        let sp = &self.spectral;
        let mut vx = sp.forward(&v.iter().map(|x| x[0]).collect::<Vec<_>>());
        let mut vy = sp.forward(&v.iter().map(|x| x[1]).collect::<Vec<_>>());
        sp.leray(&mut vx, &mut vy);
        let (vx, vy) = (sp.inverse(vx), sp.inverse(vy));
        for (i, x) in v.iter_mut().enumerate() {
            x[0] = vx[i];
            x[1] = vy[i];
        }
    }

    /// Largest |∂_x v_x + ∂_y v_y| over modes.
    pub fn divergence_norm(&self, v: &[[f64; 3]]) -> f64 {
        let sp = &self.spectral;
        let dx = sp.derivative(&sp.forward(&v.iter().map(|x| x[0]).collect::<Vec<_>>()), 0);
        let dy = sp.derivative(&sp.forward(&v.iter().map(|x| x[1]).collect::<Vec<_>>()), 1);
        let n = v.len() as f64;
        dx.iter().zip(&dy).map(|(a, b)| (a + b).norm() / n).fold(0.0, f64::max)
    }

    fn step_with(&self, q: &[Vec10], v: &[[f64; 3]], dt: f64) -> Result<(Vec<Vec10>, Vec<[f64; 3]>, f64)> {
        let out = match self.cfg.integrator {
            Integrator::ExplicitRk4 => self.rk4_step(q, v, dt)?,
            Integrator::Imex => self.imex_step(q, v, dt)?,
        };
        self.check_domain(&out.0)?;
        Ok(out)
    }

    /// One step of size dt without rejection control.
    pub fn step_pde(&self, state: &FieldState, dt: f64) -> Result<(FieldState, f64)> {
        let q: Vec<Vec10> = state.q.iter().map(QPair::to_vec).collect();
        let (qn, vn, dw) = self.step_with(&q, &state.v, dt)?;
        Ok((
            FieldState { grid: state.grid, q: qn.iter().map(QPair::from_vec).collect(), v: vn, time: state.time + dt },
            dw,
        ))
    }

    /// Integrates to t_end, reporting at `samples` equal intervals. An interval whose steps
    /// leave the domain or whose total energy rises is retried with half the step, at most 20 times.
    pub fn run<F>(&self, initial: &FieldState, mut on_sample: F) -> Result<RunSummary>
    where
        F: FnMut(&FieldState, &EnergyReport) -> Result<()>,
    {
        if initial.grid != self.cfg.grid {
            return Err(Error::InvalidArgument("initial state grid differs from the configuration".into()));
        }
        let dt_max = match self.cfg.dt {
            Some(dt) => dt,
            None => self.suggest_dt()?,
        };
        let interval = self.cfg.t_end / self.cfg.samples as f64;
        let base_sub = (interval / dt_max).ceil().max(1.0) as usize;
        let mut state = initial.clone();
        let mut q: Vec<Vec10> = state.q.iter().map(QPair::to_vec).collect();
        let mut v = state.v.clone();
        let first = self.energy_report(&state)?;
        on_sample(&state, &first)?;
        let mut reports = vec![first];
        let mut dissipated = vec![0.0];
        let mut w_total = 0.0;
        let (mut steps, mut rejected) = (0usize, 0usize);
        let mut energy = first.total;
        for k in 1..=self.cfg.samples {
            let t0 = (k - 1) as f64 * interval;
            let mut sub = base_sub;
            let mut attempt = 0;
            loop {
                let dt = interval / sub as f64;
                let mut qq = q.clone();
                let mut vv = v.clone();
                let mut ww = 0.0;
                let mut failure = String::new();
                for _ in 0..sub {
                    match self.step_with(&qq, &vv, dt) {
                        Ok((qn, vn, dw)) => {
                            qq = qn;
                            vv = vn;
                            ww += dw;
                        }
                        Err(err) => {
                            failure = err.to_string();
                            break;
                        }
                    }
                }
                if failure.is_empty() {
                    let st = FieldState {
                        grid: state.grid,
                        q: qq.iter().map(QPair::from_vec).collect(),
                        v: vv.clone(),
                        time: 0.0,
                    };
                    let e = self.total_energy(&st)?;
                    if e > energy + 1e-9 * interval + 1e-13 * energy.abs() {
                        failure = format!("energy increased by {:.3e}", e - energy);
                    } else {
                        steps += sub;
                        q = qq;
                        v = vv;
                        w_total += ww;
                        energy = e;
                        break;
                    }
                }
                attempt += 1;
                rejected += 1;
                if attempt > 20 {
                    return Err(Error::NoConvergence(format!(
                        "step control failed near t = {t0}: {failure}"
                    )));
                }
                sub *= 2;
            }
            state = FieldState {
                grid: state.grid,
                q: q.iter().map(QPair::from_vec).collect(),
                v: v.clone(),
                time: k as f64 * interval,
            };
            let rep = self.energy_report(&state)?;
            on_sample(&state, &rep)?;
            reports.push(rep);
            dissipated.push(w_total);
        }
        Ok(RunSummary { reports, dissipated, steps, rejected, dt: interval / base_sub as f64, final_state: state })
    }
}

/// Q̇ = −ℳ_Q ε⁻¹𝒥(Q) for a spatially constant state.
fn homogeneous_rhs(q: &QPair, cfg: &SimConfig) -> Result<QPair> {
    let j = bulk_gradient(q, &cfg.bulk, default_rule())?;
    let ops = direct_operators(q, cfg.closure_route, &cfg.params)?;
    Ok(QPair::from_vec(&(-ops.apply_m(&(j.to_vec() / cfg.epsilon)))))
}

fn rk4_homogeneous(q: &QPair, cfg: &SimConfig, dt: f64) -> Result<QPair> {
    let k1 = homogeneous_rhs(q, cfg)?;
    let k2 = homogeneous_rhs(&(*q + k1 * (0.5 * dt)), cfg)?;
    let k3 = homogeneous_rhs(&(*q + k2 * (0.5 * dt)), cfg)?;
    let k4 = homogeneous_rhs(&(*q + k3 * dt), cfg)?;
    let out = *q + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if domain_margin(&out) <= 0.5 * cfg.delta {
        return Err(Error::OutOfDomain("homogeneous step left the admissible set".into()));
    }
    Ok(out)
}

/// One RK4 step of homogeneous relaxation. On a domain exit the step is split
/// into 2, 4, … substeps, at most 20 times.
pub fn step_homogeneous(q: &QPair, cfg: &SimConfig, dt: f64) -> Result<QPair> {
    let mut sub = 1usize;
    for _ in 0..=20 {
        let h = dt / sub as f64;
        let mut x = *q;
        let mut ok = true;
        for _ in 0..sub {
            match rk4_homogeneous(&x, cfg, h) {
                Ok(y) => x = y,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(x);
        }
        sub *= 2;
    }
    Err(Error::NoConvergence("homogeneous step failed after 20 halvings".into()))
}

/// Homogeneous relaxation trajectory sampled after every step.
pub fn relax(q0: &QPair, cfg: &SimConfig, dt: f64, steps: usize) -> Result<Vec<(f64, QPair, f64)>> {
    let rule = default_rule();
    let mut q = *q0;
    let mut out = vec![(0.0, q, bulk_energy(&q, &cfg.bulk, rule)?)];
    for k in 1..=steps {
        q = step_homogeneous(&q, cfg, dt)?;
        out.push((k as f64 * dt, q, bulk_energy(&q, &cfg.bulk, rule)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
