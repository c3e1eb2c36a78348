//! Tools for the small-ε limit: projection onto the minimizer manifold,
//! leading-order correction and frame residuals, remainder functionals and
//! ε-sweeps from well-prepared data.

use nalgebra::{Cholesky, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FieldState, Grid, SimConfig, Simulation};
use crate::equilibrium::{hessian_spectrum, BiaxialForm, HessianSpectrum};
use crate::tensor::{
    lie_derivative, rotation_matrix, st_rotation, strictly_inside, Frame, Mat10, Mat3, QPair, Vec10, Vec3,
};
use crate::{Error, Result};

/// Closest point Q⁽⁰⁾(𝔭) of the minimizer manifold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ManifoldProjection {
    pub frame: Frame,
    pub q0: QPair,
    pub distance: f64,
    pub converged: bool,
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Minimizes ‖q − Q⁽⁰⁾(𝔭)‖ over frames with the scalars of `form` held fixed.
///
/// Seeds are the six axis orderings of the eigenframe of Q1 + 0.37·Q2 (sign flips
/// leave Q⁽⁰⁾ unchanged); the nearest one is refined by damped Gauss–Newton.
pub fn project_to_manifold(q: &QPair, form: &BiaxialForm) -> ManifoldProjection {
    let map = form.map();
    let (a, b) = q.mats();
    let eig = SymmetricEigen::new(a + b * 0.37);
    let mut frame = Frame::identity();
    let mut dist = f64::INFINITY;
    for p in PERMS {
        let mut m = Mat3::from_columns(&[
            eig.eigenvectors.column(p[0]).into_owned(),
            eig.eigenvectors.column(p[1]).into_owned(),
            eig.eigenvectors.column(p[2]).into_owned(),
        ]);
        if m.determinant() < 0.0 {
            m.column_mut(2).neg_mut();
        }
        let f = Frame::from_matrix_lossy(m);
        let d = (map_eval(form, &f) - *q).norm();
        if d < dist {
            dist = d;
            frame = f;
        }
    }
    let mut converged = false;
    for _ in 0..100 {
        let r = (map_eval(form, &frame) - *q).to_vec();
        let j: [Vec10; 3] = std::array::from_fn(|k| lie_derivative(k + 1, &map, &frame).expect("valid axis").to_vec());
        let jtj = Matrix3::from_fn(|i, k| j[i].dot(&j[k]));
        let g = Vector3::from_fn(|i, _| j[i].dot(&r));
        if g.norm() <= 1e-13 * (1.0 + r.norm()) {
            converged = true;
            break;
        }
        let Some(ch) = Cholesky::new(jtj) else { break };
        let step = -ch.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-8 {
            let w = (frame.n(0) * step[0] + frame.n(1) * step[1] + frame.n(2) * step[2]) * t;
            let cand = frame.rotated(&rotation_matrix(&w));
            let d = (map_eval(form, &cand) - *q).norm();
            if d <= dist {
                frame = cand;
                dist = d;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.norm() * t < 1e-14 {
            converged = accepted || g.norm() <= 1e-9 * (1.0 + r.norm());
            break;
        }
    }
    let q0 = map_eval(form, &frame);
    ManifoldProjection { frame, q0, distance: (*q - q0).norm(), converged }
}

fn map_eval(form: &BiaxialForm, frame: &Frame) -> QPair {
    form.with_frame(*frame).to_qpair()
}

/// Block rotation diag(D, D) acting on pair coordinates.
fn d10(r: &Mat3) -> Mat10 {
    let d5 = st_rotation(r);
    let mut d = Mat10::zeros();
    d.fixed_view_mut::<5, 5>(0, 0).copy_from(&d5);
    d.fixed_view_mut::<5, 5>(5, 5).copy_from(&d5);
    d
}

/// ℋ, ℳ and the kernel tangents at one manifold point.
#[derive(Clone, Debug)]
pub struct NodeLinearization {
    /// Rotation from the reference minimizer frame.
    pub d: Mat10,
    pub m: Mat10,
    m_chol: Cholesky<f64, nalgebra::Const<10>>,
}

/// Limit-regime context bound to one simulation.
pub struct LimitLab<'a> {
    pub sim: &'a Simulation,
    /// Hessian spectrum at the reference minimizer.
    pub spectrum: HessianSpectrum,
}

/// Leading-order quantities along a manifold-valued field.
#[derive(Clone, Debug)]
pub struct LeadingOrder {
    pub frames: Vec<Frame>,
    pub q0: Vec<QPair>,
    /// (ℳ⁽⁰⁾)⁻¹(Q̇⁽⁰⁾ − 𝒱⁽⁰⁾κ) + 𝒢(Q⁽⁰⁾).
    pub rhs: Vec<QPair>,
    /// Q⁽¹⁾_⊥ with −ℋQ⁽¹⁾ = ℙ^out rhs.
    pub q1_perp: Vec<QPair>,
    /// ξ_j·rhs, j = 1..3.
    pub residual: [Vec<f64>; 3],
    /// max over nodes of ‖ℙ^in rhs‖ / ‖rhs‖.
    pub max_in_ratio: f64,
    /// Nodes where ‖ℙ^in rhs‖ > 1e-4‖rhs‖.
    pub flagged: usize,
}

/// Remainder functionals of one (Q_R, v_R) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RemainderDiagnostics {
    pub e_norm: f64,
    pub f_norm: f64,
    pub frak_e: f64,
    /// Leading block: η‖∇v‖² + ε⁻¹⟨ℳℋ^εQ, ℋ^εQ⟩.
    pub frak_f: f64,
    pub pout_l2: f64,
}

// Component-major fields: comps × nodes.
type Comps = Vec<Vec<f64>>;

fn comps_of(q: &[QPair]) -> Comps {
    let v: Vec<Vec10> = q.iter().map(QPair::to_vec).collect();
    (0..10).map(|c| v.iter().map(|x| x[c]).collect()).collect()
}

fn comps_of_v(v: &[[f64; 3]]) -> Comps {
    (0..3).map(|c| v.iter().map(|x| x[c]).collect()).collect()
}

fn node_vec(f: &Comps, i: usize) -> Vec10 {
    Vec10::from_fn(|c, _| f[c][i])
}

fn sq_l2(f: &Comps, area: f64) -> f64 {
    f.iter().flat_map(|c| c.iter()).map(|x| x * x).sum::<f64>() * area
}

impl<'a> LimitLab<'a> {
    pub fn new(sim: &'a Simulation) -> Result<Self> {
        let spectrum = hessian_spectrum(&sim.minimizer.form, &sim.cfg.bulk, sim.rule(), 1e-6)?;
        if spectrum.kernel_basis.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "the minimizer is not biaxial: tangent span has dimension {}",
                spectrum.kernel_basis.len()
            )));
        }
        Ok(Self { sim, spectrum })
    }

    pub fn form(&self) -> &BiaxialForm {
        &self.sim.minimizer.form
    }

    /// Per-node projection, in parallel.
    pub fn project_field(&self, q: &[QPair]) -> Vec<ManifoldProjection> {
        let form = *self.form();
        q.par_iter().map(|x| project_to_manifold(x, &form)).collect()
    }

    fn rotation_of(&self, frame: &Frame) -> Mat3 {
        frame.matrix() * self.form().frame.matrix().transpose()
    }

    /// ℳ at Q⁽⁰⁾ from the simulation's closure, with the frame rotation.
    pub fn linearize(&self, frames: &[Frame], q0: &[QPair]) -> Result<Vec<NodeLinearization>> {
        let ops = self.sim.operators(q0)?;
        frames
            .par_iter()
            .zip(ops.par_iter())
            .map(|(f, op)| {
                let m = op.m_lab();
                let m = (m + m.transpose()) * 0.5;
                let m_chol = Cholesky::new(m)
                    .ok_or_else(|| Error::OutOfDomain("mobility not positive definite on the manifold".into()))?;
                Ok(NodeLinearization { d: d10(&self.rotation_of(f)), m, m_chol })
            })
            .collect()
    }

    fn h_apply(&self, lin: &NodeLinearization, x: &Vec10) -> Vec10 {
        lin.d * (self.spectrum.hessian * (lin.d.transpose() * x))
    }

    fn proj_out(&self, lin: &NodeLinearization, x: &Vec10) -> Vec10 {
        lin.d * self.spectrum.project_out(&QPair::from_vec(&(lin.d.transpose() * x))).to_vec()
    }

    fn proj_in(&self, lin: &NodeLinearization, x: &Vec10) -> Vec10 {
        lin.d * self.spectrum.project_in(&QPair::from_vec(&(lin.d.transpose() * x))).to_vec()
    }

    fn solve_out(&self, lin: &NodeLinearization, x: &Vec10) -> Vec10 {
        lin.d * self.spectrum.solve_out(&QPair::from_vec(&(lin.d.transpose() * x))).to_vec()
    }

    fn xi(&self, lin: &NodeLinearization, k: usize) -> Vec10 {
        lin.d * self.spectrum.xi[k].to_vec()
    }

    /// ℙ^out at the manifold point of `frame`.
    pub fn project_out_at(&self, frame: &Frame, q: &QPair) -> QPair {
        let d = d10(&self.rotation_of(frame));
        QPair::from_vec(&(d * self.spectrum.project_out(&QPair::from_vec(&(d.transpose() * q.to_vec()))).to_vec()))
    }

    fn velocity_gradient(&self, v: &[[f64; 3]]) -> Vec<Mat3> {
        let sp = &self.sim.spectral;
        let vc = comps_of_v(v);
        let dv: Vec<[Vec<f64>; 2]> = vc
            .iter()
            .map(|c| {
                let h = sp.forward(c);
                [sp.deriv_real(&h, 0), sp.deriv_real(&h, 1)]
            })
            .collect();
        (0..v.len()).map(|i| Mat3::from_fn(|r, c| if c < 2 { dv[r][c][i] } else { 0.0 })).collect()
    }

    /// Convective derivative v·∇Q of a pair field.
    fn convection(&self, q: &[QPair], v: &[[f64; 3]]) -> Vec<Vec10> {
        let sp = &self.sim.spectral;
        let qc = comps_of(q);
        let d: Vec<[Vec<f64>; 2]> = qc
            .iter()
            .map(|c| {
                let h = sp.forward(c);
                [sp.deriv_real(&h, 0), sp.deriv_real(&h, 1)]
            })
            .collect();
        (0..q.len()).map(|i| Vec10::from_fn(|c, _| v[i][0] * d[c][0][i] + v[i][1] * d[c][1][i])).collect()
    }

    /// Leading-order terms from the material rate Q̇⁽⁰⁾ of a manifold-valued field.
    pub fn leading_terms(
        &self,
        frames: &[Frame],
        q0: &[QPair],
        rate: &[Vec10],
        v: &[[f64; 3]],
    ) -> Result<LeadingOrder> {
        let lin = self.linearize(frames, q0)?;
        let ops = self.sim.operators(q0)?;
        let kappa = self.velocity_gradient(v);
        let g = self.sim.elastic_force(q0);
        let per: Vec<(Vec10, Vec10, [f64; 3], f64)> = (0..q0.len())
            .into_par_iter()
            .map(|i| {
                let l = &lin[i];
                let rhs = l.m_chol.solve(&(rate[i] - ops[i].apply_v(&kappa[i]))) + g[i].to_vec();
                let out = self.proj_out(l, &rhs);
                let q1 = -self.solve_out(l, &out);
                let res = std::array::from_fn(|k| self.xi(l, k).dot(&rhs));
                let ratio = self.proj_in(l, &rhs).norm() / rhs.norm().max(1e-300);
                (rhs, q1, res, ratio)
            })
            .collect();
        let max_in_ratio = per.iter().map(|p| p.3).fold(0.0, f64::max);
        Ok(LeadingOrder {
            frames: frames.to_vec(),
            q0: q0.to_vec(),
            rhs: per.iter().map(|p| QPair::from_vec(&p.0)).collect(),
            q1_perp: per.iter().map(|p| QPair::from_vec(&p.1)).collect(),
            residual: std::array::from_fn(|k| per.iter().map(|p| p.2[k]).collect()),
            max_in_ratio,
            flagged: per.iter().filter(|p| p.3 > 1e-4).count(),
        })
    }

    /// Material rate Q̇⁽⁰⁾ = Σ ω_k ξ_k fixed by the three solvability conditions
    /// ξ_j·[(ℳ⁽⁰⁾)⁻¹(Q̇⁽⁰⁾ − 𝒱⁽⁰⁾κ) + 𝒢(Q⁽⁰⁾)] = 0.
    pub fn frame_rate(&self, frames: &[Frame], q0: &[QPair], v: &[[f64; 3]]) -> Result<Vec<Vec10>> {
        let lin = self.linearize(frames, q0)?;
        let ops = self.sim.operators(q0)?;
        let kappa = self.velocity_gradient(v);
        let g = self.sim.elastic_force(q0);
        (0..q0.len())
            .into_par_iter()
            .map(|i| {
                let l = &lin[i];
                let xi: [Vec10; 3] = std::array::from_fn(|k| self.xi(l, k));
                let mxi: [Vec10; 3] = std::array::from_fn(|k| l.m_chol.solve(&xi[k]));
                let a = Matrix3::from_fn(|j, k| xi[j].dot(&mxi[k]));
                let vk = ops[i].apply_v(&kappa[i]);
                let b = Vector3::from_fn(|j, _| mxi[j].dot(&vk) - xi[j].dot(&g[i].to_vec()));
                let w = a
                    .lu()
                    .solve(&b)
                    .ok_or_else(|| Error::NoConvergence("singular frame-rate system".into()))?;
                Ok(xi[0] * w[0] + xi[1] * w[1] + xi[2] * w[2])
            })
            .collect()
    }

    /// Leading-order terms at the middle of three equally spaced states, with
    /// Q̇⁽⁰⁾ from the central difference of the projected fields plus convection.
    pub fn leading_from_states(
        &self,
        prev: &[ManifoldProjection],
        cur: &[ManifoldProjection],
        next: &[ManifoldProjection],
        h: f64,
        v: &[[f64; 3]],
    ) -> Result<LeadingOrder> {
        let q0: Vec<QPair> = cur.iter().map(|p| p.q0).collect();
        let frames: Vec<Frame> = cur.iter().map(|p| p.frame).collect();
        let conv = self.convection(&q0, v);
        let rate: Vec<Vec10> = (0..q0.len())
            .map(|i| (next[i].q0 - prev[i].q0).to_vec() * (0.5 / h) + conv[i])
            .collect();
        self.leading_terms(&frames, &q0, &rate, v)
    }

    /// The remainder functionals of (qr, vr) about the manifold field given by `frames`.
    pub fn remainder_energy(
        &self,
        qr: &[QPair],
        vr: &[[f64; 3]],
        frames: &[Frame],
        q0: &[QPair],
    ) -> Result<RemainderDiagnostics> {
        let lin = self.linearize(frames, q0)?;
        let sp = &self.sim.spectral;
        let eps = self.sim.cfg.epsilon;
        let eta = self.sim.cfg.params.eta;
        let area = self.sim.cfg.grid.cell_area();
        let n = qr.len();
        let deriv = Derivs::new(sp, &comps_of(qr));
        let g_hats = sp.apply_elastic(&deriv.hats);
        let g = Derivs::from_hats(sp, g_hats);
        let vd = Derivs::new(sp, &comps_of_v(vr));

        // ℋ^ε f = ℋ f + ε𝒢 f, evaluated at each node.
        let h_eps = |f: &Comps, gf: &Comps, i: usize| self.h_apply(&lin[i], &node_vec(f, i)) + node_vec(gf, i) * eps;
        let q = &deriv.f;
        let (qx, qy, ql) = (&deriv.dx, &deriv.dy, &deriv.lap);
        let (gq, gx, gy, gl) = (&g.f, &g.dx, &g.dy, &g.lap);
        let per: Vec<[f64; 6]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let l = &lin[i];
                let qi = node_vec(q, i);
                let hq = h_eps(q, gq, i);
                let grad_term = h_eps(qx, gx, i).dot(&node_vec(qx, i)) + h_eps(qy, gy, i).dot(&node_vec(qy, i));
                [
                    l.m_chol.solve(&qi).dot(&qi),
                    hq.dot(&qi),
                    grad_term,
                    h_eps(ql, gl, i).dot(&node_vec(ql, i)),
                    (l.m * hq).dot(&hq),
                    self.proj_out(l, &qi).norm_squared(),
                ]
            })
            .collect();
        let sum = |k: usize| per.iter().map(|p| p[k]).sum::<f64>() * area;
        let v2 = sq_l2(&vd.f, area);
        let gv2 = sq_l2(&vd.dx, area) + sq_l2(&vd.dy, area);
        let lv2 = sq_l2(&vd.lap, area);
        let frak_e = 0.5
            * (v2 + sum(0) + sum(1) / eps + eps * eps * (gv2 + sum(2) / eps) + eps.powi(4) * (lv2 + sum(3) / eps));
        let frak_f = eta * gv2 + sum(4) / eps;

        let q_h1 = (sq_l2(q, area) + sq_l2(qx, area) + sq_l2(qy, area)).sqrt();
        let ql_d = Derivs::new(sp, ql);
        let grad_lap_q = (sq_l2(&ql_d.dx, area) + sq_l2(&ql_d.dy, area)).sqrt();
        let e_norm = q_h1
            + eps * sq_l2(ql, area).sqrt()
            + eps * eps * grad_lap_q
            + v2.sqrt()
            + eps * gv2.sqrt()
            + eps * eps * lv2.sqrt();
        let vl_d = Derivs::new(sp, &vd.lap);
        let lap_grad_v = (sq_l2(&vl_d.dx, area) + sq_l2(&vl_d.dy, area)).sqrt();
        let f_norm = eps * (sq_l2(gx, area) + sq_l2(gy, area)).sqrt() + eps * eps * sq_l2(gl, area).sqrt()
            + eps * eps * lap_grad_v;
        Ok(RemainderDiagnostics { e_norm, f_norm, frak_e, frak_f, pout_l2: sum(5).sqrt() })
    }
}

/// A field with its spectra, first derivatives and Laplacian.
struct Derivs {
    hats: Vec<Vec<rustfft::num_complex::Complex64>>,
    f: Comps,
    dx: Comps,
    dy: Comps,
    lap: Comps,
}

impl Derivs {
    fn new(sp: &crate::dynamics::Spectral, f: &Comps) -> Self {
        let hats = f.iter().map(|c| sp.forward(c)).collect();
        Self::from_hats(sp, hats)
    }

    fn from_hats(sp: &crate::dynamics::Spectral, hats: Vec<Vec<rustfft::num_complex::Complex64>>) -> Self {
        let f = hats.iter().map(|h| sp.inverse(h.clone())).collect();
        let dx = hats.iter().map(|h| sp.deriv_real(h, 0)).collect();
        let dy = hats.iter().map(|h| sp.deriv_real(h, 1)).collect();
        let lap = hats
            .iter()
            .map(|h| sp.inverse(h.iter().enumerate().map(|(i, c)| c * sp.laplacian_symbol(i)).collect()))
            .collect();
        Self { hats, f, dx, dy, lap }
    }
}

/// Settings of an ε-sweep from well-prepared data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Everything except ε, which is taken from `eps`.
    pub base: SimConfig,
    /// Descending.
    pub eps: Vec<f64>,
    /// Amplitude of the single-mode frame modulation, in radians.
    pub frame_amplitude: f64,
    pub velocity_amplitude: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let l = 8.0 * std::f64::consts::PI;
        Self {
            base: SimConfig { grid: Grid { lx: l, ly: l, ..Grid::default() }, t_end: 1.0, samples: 100, ..SimConfig::default() },
            eps: vec![0.1, 0.05, 0.025],
            frame_amplitude: 0.5,
            velocity_amplitude: 0.1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.eps.is_empty() || self.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::InvalidArgument("eps must be a non-empty list of positive numbers".into()));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("eps must be strictly descending".into()));
        }
        if self.base.samples < 3 {
            return Err(Error::InvalidArgument("a sweep needs at least 3 samples per run".into()));
        }
        if !(self.frame_amplitude.is_finite() && self.velocity_amplitude.is_finite()) {
            return Err(Error::InvalidArgument("amplitudes must be finite".into()));
        }
        Ok(())
    }
}

/// Frames exp(a·w(x))·𝔭_min with w = (sin k_y y, cos k_x x, sin(k_x x + k_y y)) on the
/// lowest box modes, the manifold field they carry, and a divergence-free single-mode velocity.
pub fn modulated_field(sim: &Simulation, frame_amplitude: f64, velocity_amplitude: f64) -> (Vec<Frame>, FieldState) {
    let g = sim.cfg.grid;
    let (kx, ky) = (2.0 * std::f64::consts::PI / g.lx, 2.0 * std::f64::consts::PI / g.ly);
    let form = sim.minimizer.form;
    let frames: Vec<Frame> = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let w = Vec3::new((ky * y).sin(), (kx * x).cos(), (kx * x + ky * y).sin()) * frame_amplitude;
            form.frame.rotated(&rotation_matrix(&w))
        })
        .collect();
    let q: Vec<QPair> = frames.iter().map(|f| map_eval(&form, f)).collect();
    let mut v: Vec<[f64; 3]> = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let a = velocity_amplitude;
            [a * (ky * y).sin(), a * (kx * x).cos(), 0.5 * a * (kx * x + ky * y).sin()]
        })
        .collect();
    sim.project_velocity(&mut v);
    (frames, FieldState { grid: g, q, v, time: 0.0 })
}

/// Q⁽⁰⁾(𝔭(x)) + εQ⁽¹⁾_⊥(x) on the field of [`modulated_field`].
pub fn well_prepared(lab: &LimitLab, frame_amplitude: f64, velocity_amplitude: f64) -> Result<(FieldState, LeadingOrder)> {
    let sim = lab.sim;
    let (frames, st) = modulated_field(sim, frame_amplitude, velocity_amplitude);
    let rate = lab.frame_rate(&frames, &st.q, &st.v)?;
    let lead = lab.leading_terms(&frames, &st.q, &rate, &st.v)?;
    let eps = sim.cfg.epsilon;
    let q: Vec<QPair> = st.q.iter().zip(&lead.q1_perp).map(|(a, b)| *a + *b * eps).collect();
    if let Some(i) = q.iter().position(|x| !strictly_inside(x, sim.cfg.delta)) {
        return Err(Error::OutOfDomain(format!("prepared data leaves the admissible set at node {i}")));
    }
    Ok((FieldState { q, ..st }, lead))
}

/// Diagnostics of one run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRun {
    pub eps: f64,
    /// sup_t ‖Q^ε − Q⁽⁰⁾‖_{L²} with Q⁽⁰⁾ the pointwise projection.
    pub sup_dist: f64,
    /// sup_t ‖ℙ^out(Q^ε − Q⁽⁰⁾)‖_{L²}.
    pub sup_pout: f64,
    /// L² norms over space and interior sample times of ξ_j·rhs.
    pub frame_res_l2: [f64; 3],
    /// sup_t 𝔈 of the defect (Q^ε − Q⁽⁰⁾ − εQ⁽¹⁾_⊥)/ε with zero velocity defect.
    pub frak_e_sup: f64,
    /// sup_t ‖ℙ^out[(Q^ε − Q⁽⁰⁾)/ε] − Q⁽¹⁾_⊥‖_{L²}.
    pub q1_err_sup: f64,
    pub fit_order: f64,
    pub fit_r2: f64,
    pub steps: usize,
    pub dt: f64,
    pub failure: Option<String>,
}

impl SweepRun {
    fn failed(eps: f64, msg: String) -> Self {
        Self {
            eps,
            sup_dist: f64::NAN,
            sup_pout: f64::NAN,
            frame_res_l2: [f64::NAN; 3],
            frak_e_sup: f64::NAN,
            q1_err_sup: f64::NAN,
            fit_order: f64::NAN,
            fit_r2: f64::NAN,
            steps: 0,
            dt: f64::NAN,
            failure: Some(msg),
        }
    }
}

/// All runs plus least-squares fits over the successful ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    /// Order of sup_dist in ε.
    pub fit_order: f64,
    pub fit_r2: f64,
    /// Order of q1_err_sup in ε.
    pub q1_order: f64,
    pub q1_r2: f64,
    /// Largest frak_e_sup divided by the one at the largest ε.
    pub frak_e_ratio: f64,
}

/// Slope and R² of the least-squares line through (ln x, ln y).
pub fn loglog_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return (f64::NAN, f64::NAN);
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

fn l2(q: &[QPair], area: f64) -> f64 {
    (q.iter().map(|x| x.dot(x)).sum::<f64>() * area).sqrt()
}

/// One run of the sweep at the given ε.
pub fn sweep_run(cfg: &SweepConfig, eps: f64, seed: u64) -> Result<SweepRun> {
    let sim = Simulation::new(SimConfig { epsilon: eps, ..cfg.base.clone() }, seed)?;
    let lab = LimitLab::new(&sim)?;
    let (init, _) = well_prepared(&lab, cfg.frame_amplitude, cfg.velocity_amplitude)?;
    let mut states = Vec::with_capacity(cfg.base.samples + 1);
    let summary = sim.run(&init, |st, _| {
        states.push(st.clone());
        Ok(())
    })?;
    let area = sim.cfg.grid.cell_area();
    let h = cfg.base.t_end / cfg.base.samples as f64;
    let zero_v = vec![[0.0; 3]; sim.cfg.grid.len()];
    let mut out = SweepRun::failed(eps, String::new());
    out.failure = None;
    out.steps = summary.steps;
    out.dt = summary.dt;
    let (mut sup_dist, mut sup_pout, mut frak_e, mut q1_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut acc = [0.0; 3];
    let mut window: Vec<Vec<ManifoldProjection>> = Vec::new();
    for (k, st) in states.iter().enumerate() {
        let proj = lab.project_field(&st.q);
        let diff: Vec<QPair> = st.q.iter().zip(&proj).map(|(q, p)| *q - p.q0).collect();
        sup_dist = sup_dist.max(l2(&diff, area));
        let pout: Vec<QPair> = diff.iter().zip(&proj).map(|(d, p)| lab.project_out_at(&p.frame, d)).collect();
        sup_pout = sup_pout.max(l2(&pout, area));
        window.push(proj);
        if window.len() > 3 {
            window.remove(0);
        }
        if window.len() == 3 {
            // Centre sample k − 1.
            let mid = &states[k - 1];
            let lead = lab.leading_from_states(&window[0], &window[1], &window[2], h, &mid.v)?;
            for (j, a) in acc.iter_mut().enumerate() {
                *a += lead.residual[j].iter().map(|r| r * r).sum::<f64>() * area * h;
            }
            let pout_mid: Vec<QPair> = mid
                .q
                .iter()
                .zip(&window[1])
                .zip(&lead.q1_perp)
                .map(|((q, p), q1)| lab.project_out_at(&p.frame, &((*q - p.q0) * (1.0 / eps))) - *q1)
                .collect();
            q1_err = q1_err.max(l2(&pout_mid, area));
            let qr: Vec<QPair> = mid
                .q
                .iter()
                .zip(&lead.q0)
                .zip(&lead.q1_perp)
                .map(|((q, q0), q1)| (*q - *q0 - *q1 * eps) * (1.0 / eps))
                .collect();
            let rem = lab.remainder_energy(&qr, &zero_v, &lead.frames, &lead.q0)?;
            frak_e = frak_e.max(rem.frak_e);
        }
    }
    out.sup_dist = sup_dist;
    out.sup_pout = sup_pout;
    out.frame_res_l2 = acc.map(f64::sqrt);
    out.frak_e_sup = frak_e;
    out.q1_err_sup = q1_err;
    Ok(out)
}

/// Runs every ε in turn; a failing run is recorded and the sweep continues.
pub fn epsilon_sweep(cfg: &SweepConfig, seed: u64) -> Result<SweepReport> {
    cfg.validate()?;
    let mut runs: Vec<SweepRun> = cfg
        .eps
        .iter()
        .map(|&e| sweep_run(cfg, e, seed).unwrap_or_else(|err| SweepRun::failed(e, err.to_string())))
        .collect();
    let ok: Vec<&SweepRun> = runs.iter().filter(|r| r.failure.is_none()).collect();
    let xs: Vec<f64> = ok.iter().map(|r| r.eps).collect();
    let (fit_order, fit_r2) = loglog_fit(&xs, &ok.iter().map(|r| r.sup_dist).collect::<Vec<_>>());
    let (q1_order, q1_r2) = loglog_fit(&xs, &ok.iter().map(|r| r.q1_err_sup).collect::<Vec<_>>());
    let frak_e_ratio = match ok.first() {
        Some(first) => ok.iter().map(|r| r.frak_e_sup).fold(0.0, f64::max) / first.frak_e_sup,
        None => f64::NAN,
    };
    for r in runs.iter_mut().filter(|r| r.failure.is_none()) {
        r.fit_order = fit_order;
        r.fit_r2 = fit_r2;
    }
    Ok(SweepReport { runs, fit_order, fit_r2, q1_order, q1_r2, frak_e_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ElasticCoefficients;

    fn sim(n: usize, eps: f64, elastic: ElasticCoefficients) -> Simulation {
        let cfg = SimConfig {
            epsilon: eps,
            grid: Grid { nx: n, ny: n, ..Grid::default() },
            elastic,
            t_end: 0.01,
            samples: 2,
            ..SimConfig::default()
        };
        Simulation::new(cfg, 0).unwrap()
    }

    fn tilted(lab: &LimitLab, w: Vec3) -> Frame {
        lab.form().frame.rotated(&rotation_matrix(&w))
    }

    #[test]
    fn projection_of_manifold_point_and_normal_offset() {
        let s = sim(2, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let f = tilted(&lab, Vec3::new(0.3, -1.1, 0.7));
        let q = map_eval(lab.form(), &f);
        let p = project_to_manifold(&q, lab.form());
        assert!(p.converged && p.distance < 1e-12, "{}", p.distance);
        assert!((p.q0 - q).norm() < 1e-12);

        let lin = lab.linearize(&[f], &[q]).unwrap();
        let raw = QPair::from_array(&[0.3, -0.1, 0.2, 0.5, -0.4, 0.1, 0.2, -0.3, 0.6, 0.05]).to_vec();
        let n = lab.proj_out(&lin[0], &raw);
        let pert = QPair::from_vec(&(n * (0.01 / n.norm())));
        let p = project_to_manifold(&(q + pert), lab.form());
        assert!((p.distance - 0.01).abs() < 1e-6, "{}", p.distance);
        assert!((p.q0 - q).norm() < 1e-6);
    }

    #[test]
    fn projection_is_equivariant_and_never_worse_than_seed() {
        let s = sim(2, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let f = tilted(&lab, Vec3::new(-0.4, 0.2, 1.3));
        let q = map_eval(lab.form(), &f) + QPair::from_array(&[0.02, -0.01, 0.03, 0.0, 0.01, -0.02, 0.01, 0.0, 0.02, 0.01]);
        let p = project_to_manifold(&q, lab.form());
        let r = rotation_matrix(&Vec3::new(0.9, -0.3, 0.4));
        let pr = project_to_manifold(&q.rotate(&r), lab.form());
        assert!((p.distance - pr.distance).abs() < 1e-10);
        assert!((pr.q0 - p.q0.rotate(&r)).norm() < 1e-8);
        assert!(p.distance <= (q - map_eval(lab.form(), &f)).norm() + 1e-15);
    }

    #[test]
    fn q1_perp_vanishes_for_constant_equilibrium() {
        let s = sim(4, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let n = s.cfg.grid.len();
        let frames = vec![lab.form().frame; n];
        let q0 = vec![lab.form().to_qpair(); n];
        let lead = lab.leading_terms(&frames, &q0, &vec![Vec10::zeros(); n], &vec![[0.0; 3]; n]).unwrap();
        assert!(lead.q1_perp.iter().all(|x| x.norm() < 1e-12));
        assert!(lead.residual.iter().flatten().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn prepared_data_solves_the_out_equation_and_the_solvability_system() {
        let s = sim(8, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let (st, lead) = well_prepared(&lab, 0.4, 0.1).unwrap();
        assert!(lead.max_in_ratio < 1e-10, "{}", lead.max_in_ratio);
        assert_eq!(lead.flagged, 0);
        assert!(lead.q1_perp.iter().any(|x| x.norm() > 1e-3));
        let lin = lab.linearize(&lead.frames, &lead.q0).unwrap();
        for i in 0..st.q.len() {
            let q1 = lead.q1_perp[i].to_vec();
            let out = lab.proj_out(&lin[i], &lead.rhs[i].to_vec());
            assert!((lab.h_apply(&lin[i], &q1) + out).norm() < 1e-10);
            assert!(lab.proj_in(&lin[i], &q1).norm() < 1e-10);
        }
        assert!(s.divergence_norm(&st.v) < 1e-12);
    }

    #[test]
    fn frame_residual_is_invariant_under_global_rotation() {
        // A quarter turn about z applied to tensors and positions maps the square grid onto itself.
        let s = sim(8, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let g = s.cfg.grid;
        let field = |x: f64, y: f64| tilted(&lab, Vec3::new(0.3 * y.sin(), 0.2 * x.cos(), 0.4 * (x + 2.0 * y).sin()));
        let frames: Vec<Frame> = (0..g.len()).map(|i| field(g.coords(i).0, g.coords(i).1)).collect();
        let r = rotation_matrix(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        // Node of Rᵀx for the node x = (ix, iy): (iy, −ix).
        let back = |i: usize| {
            let (ix, iy) = (i % g.nx, i / g.nx);
            ((g.nx - ix) % g.nx) * g.nx + iy
        };
        let rotated: Vec<Frame> = (0..g.len()).map(|i| frames[back(i)].rotated(&r)).collect();
        let zero_rate = vec![Vec10::zeros(); g.len()];
        let zero_v = vec![[0.0; 3]; g.len()];
        let eval = |fr: &[Frame]| {
            let q0: Vec<QPair> = fr.iter().map(|f| map_eval(lab.form(), f)).collect();
            lab.leading_terms(fr, &q0, &zero_rate, &zero_v).unwrap()
        };
        let (a, b) = (eval(&frames), eval(&rotated));
        let scale = a.residual.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(scale > 1e-3);
        for j in 0..3 {
            for i in 0..g.len() {
                assert!((b.residual[j][i] - a.residual[j][back(i)]).abs() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn remainder_functional_basic_properties() {
        let s = sim(8, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let g = s.cfg.grid;
        let n = g.len();
        let frames = vec![lab.form().frame; n];
        let q0 = vec![lab.form().to_qpair(); n];
        let zero = lab.remainder_energy(&vec![QPair::default(); n], &vec![[0.0; 3]; n], &frames, &q0).unwrap();
        assert_eq!(zero, RemainderDiagnostics::default());

        let qr: Vec<QPair> = (0..n)
            .map(|i| {
                let (x, y) = g.coords(i);
                QPair::from_array(&std::array::from_fn::<f64, 10, _>(|c| ((c + 1) as f64 * x + y).sin() * 0.1))
            })
            .collect();
        let mut vr: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let (x, y) = g.coords(i);
                [y.sin(), x.cos(), (x - y).sin()]
            })
            .collect();
        s.project_velocity(&mut vr);
        let a = lab.remainder_energy(&qr, &vr, &frames, &q0).unwrap();
        assert!(a.frak_e > 0.0 && a.frak_f > 0.0 && a.e_norm > 0.0 && a.f_norm > 0.0 && a.pout_l2 > 0.0);
        let q2: Vec<QPair> = qr.iter().map(|x| *x * 2.0).collect();
        let v2: Vec<[f64; 3]> = vr.iter().map(|v| v.map(|c| 2.0 * c)).collect();
        let b = lab.remainder_energy(&q2, &v2, &frames, &q0).unwrap();
        assert!((b.frak_e - 4.0 * a.frak_e).abs() < 1e-10 * a.frak_e);
        assert!((b.frak_f - 4.0 * a.frak_f).abs() < 1e-10 * a.frak_f);
        assert!((b.e_norm - 2.0 * a.e_norm).abs() < 1e-10 * a.e_norm);
        assert!((b.pout_l2 - 2.0 * a.pout_l2).abs() < 1e-10 * a.pout_l2);
    }

    #[test]
    fn kernel_remainder_stays_bounded_as_eps_shrinks() {
        let frak = |eps: f64| {
            let s = sim(8, eps, ElasticCoefficients::default());
            let lab = LimitLab::new(&s).unwrap();
            let g = s.cfg.grid;
            let frames = vec![lab.form().frame; g.len()];
            let q0 = vec![lab.form().to_qpair(); g.len()];
            let qr: Vec<QPair> = (0..g.len())
                .map(|i| {
                    let (x, y) = g.coords(i);
                    lab.spectrum.xi[0] * x.sin() + lab.spectrum.xi[2] * (0.5 * (x + y).cos())
                })
                .collect();
            lab.remainder_energy(&qr, &vec![[0.0; 3]; g.len()], &frames, &q0).unwrap().frak_e
        };
        let (a, b) = (frak(1e-2), frak(1e-4));
        assert!(a.is_finite() && b < 1.1 * a, "{a} {b}");
    }

    #[test]
    fn loglog_fit_recovers_power_laws() {
        let x = [0.1, 0.05, 0.025];
        let (p, r2) = loglog_fit(&x, &x.map(|e| 3.0 * e * e));
        assert!((p - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(loglog_fit(&x, &[1.0, 0.0, 1.0]).0.is_nan());
    }

    #[test]
    fn rotated_hessian_derivative_is_a_commutator() {
        let s = sim(2, 0.1, ElasticCoefficients::default());
        let lab = LimitLab::new(&s).unwrap();
        let h0 = lab.spectrum.hessian;
        let axis = Vec3::new(0.2, -0.5, 0.8);
        let h_at = |t: f64| {
            let d = d10(&rotation_matrix(&(axis * t)));
            d * h0 * d.transpose()
        };
        let gen = |h: f64| (d10(&rotation_matrix(&(axis * h))) - d10(&rotation_matrix(&(axis * -h)))) / (2.0 * h);
        let omega = gen(1e-6);
        let exact = omega * h0 - h0 * omega;
        let err = |h: f64| ((h_at(h) - h_at(-h)) / (2.0 * h) - exact).norm();
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "{e1} {e2}");
    }

    #[test]
    fn sweep_config_is_strict_and_validated() {
        let cfg = SweepConfig::default();
        assert!(cfg.validate().is_ok());
        assert!(SweepConfig { eps: vec![0.05, 0.1], ..cfg.clone() }.validate().is_err());
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SweepConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<SweepConfig>(r#"{"epsilons": [0.1]}"#).is_err());
    }
}
