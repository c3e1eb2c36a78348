use super::*;
use crate::tensor::{Frame, Vec3};

fn small_cfg(n: usize) -> SimConfig {
    SimConfig { grid: Grid { nx: n, ny: n, ..Grid::default() }, samples: 2, t_end: 0.01, ..SimConfig::default() }
}

fn modulated(sim: &Simulation, amp: f64) -> FieldState {
    let g = sim.cfg.grid;
    let form = sim.minimizer.form;
    let q = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let w = Vec3::new(0.3 * (y).cos(), 0.2 * x.sin(), (x + y).sin()) * amp;
            form.with_frame(Frame::from_rotation_vector(&w)).to_qpair()
        })
        .collect();
    FieldState { grid: g, q, v: vec![[0.0; 3]; g.len()], time: 0.0 }
}

fn with_velocity(sim: &Simulation, mut st: FieldState, amp: f64) -> FieldState {
    for (i, v) in st.v.iter_mut().enumerate() {
        let (x, y) = sim.cfg.grid.coords(i);
        *v = [amp * y.sin(), amp * (x + 0.3).cos(), amp * 0.5 * (x - y).sin()];
    }
    sim.project_velocity(&mut st.v);
    st
}

#[test]
fn equilibrium_state_is_stationary() {
    let sim = Simulation::new(small_cfg(8), 0).unwrap();
    let st = FieldState::uniform(sim.cfg.grid, sim.minimizer.form.to_qpair());
    let mu = sim.chemical_potential(&st.q).unwrap();
    assert!(mu.iter().all(|m| m.norm() < 1e-9));
    let rep = sim.energy_report(&st).unwrap();
    assert!(rep.diss_mu.abs() < 1e-15 && rep.diss_visc == 0.0 && rep.diss_p == 0.0);
    let (next, dw) = sim.step_pde(&st, 1e-3).unwrap();
    assert!(dw.abs() < 1e-15);
    let d = next.q.iter().zip(&st.q).map(|(a, b)| (*a - *b).norm()).fold(0.0, f64::max);
    assert!(d < 1e-12);
    assert!((sim.total_energy(&next).unwrap() - rep.total).abs() < 1e-12 * rep.total.abs());
}

#[test]
fn elastic_force_symbol_and_coercivity() {
    let sim = Simulation::new(small_cfg(16), 0).unwrap();
    let g = sim.cfg.grid;
    let st = FieldState::uniform(g, sim.minimizer.form.to_qpair());
    assert!(sim.elastic_force(&st.q).iter().all(|x| x.norm() < 1e-12));
    // Q = Q̂ cos(2x + y): 𝒢 = G(k) Q̂ cos(2x + y).
    let qhat = QPair::from_array(&[0.1, -0.2, 0.05, 0.3, 0.0, 0.2, 0.1, -0.1, 0.0, 0.4]);
    let q: Vec<QPair> = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            qhat * (2.0 * x + y).cos()
        })
        .collect();
    let out = sim.elastic_force(&q);
    let (kx, ky) = (2.0, 1.0);
    let k = Vec3::new(kx, ky, 0.0);
    let (q1, q2) = qhat.mats();
    let ec = sim.cfg.elastic;
    let sym = |m: Mat3| (m + m.transpose()) * 0.5;
    let dd = |qm: &Mat3| sym(k * (qm * k).transpose());
    let s1 = q1 * (ec.c22 * 5.0) + q2 * (ec.c24 * 5.0) + dd(&q1) * ec.c28 + dd(&q2) * ec.c210;
    let s2 = q1 * (ec.c24 * 5.0) + q2 * (ec.c23 * 5.0) + dd(&q1) * ec.c210 + dd(&q2) * ec.c29;
    let symbol = QPair::from_mats(&crate::tensor::sym_traceless(&s1), &crate::tensor::sym_traceless(&s2));
    for (i, o) in out.iter().enumerate() {
        let (x, y) = g.coords(i);
        assert!((*o - symbol * (2.0 * x + y).cos()).norm() < 1e-11);
    }
    let rnd: Vec<QPair> = (0..g.len())
        .map(|i| QPair::from_array(&std::array::from_fn::<f64, 10, _>(|c| ((i * 31 + c * 7) as f64).sin())))
        .collect();
    let e = sim.elastic_force(&rnd);
    assert!(rnd.iter().zip(&e).map(|(a, b)| a.dot(b)).sum::<f64>() >= 0.0);
}

#[test]
fn chemical_potential_scales_with_epsilon_and_matches_energy_derivative() {
    let cfg = small_cfg(8);
    let sim = Simulation::new(cfg.clone(), 0).unwrap();
    let sim2 = Simulation::new(SimConfig { epsilon: 2.0 * cfg.epsilon, ..cfg }, 0).unwrap();
    let st = modulated(&sim, 0.2);
    let g = sim.elastic_force(&st.q);
    let m1 = sim.chemical_potential(&st.q).unwrap();
    let m2 = sim2.chemical_potential(&st.q).unwrap();
    for i in 0..st.q.len() {
        let b1 = m1[i] - g[i];
        let b2 = m2[i] - g[i];
        assert!((b1 * 0.5 - b2).norm() < 1e-12 * b1.norm().max(1.0));
    }
    let dir: Vec<QPair> = (0..st.q.len())
        .map(|i| QPair::from_array(&std::array::from_fn::<f64, 10, _>(|c| ((i * 13 + c * 3) as f64).cos() * 0.01)))
        .collect();
    let shifted = |h: f64| FieldState {
        q: st.q.iter().zip(&dir).map(|(a, b)| *a + *b * h).collect(),
        ..st.clone()
    };
    let h = 1e-5;
    let fd = (sim.total_energy(&shifted(h)).unwrap() - sim.total_energy(&shifted(-h)).unwrap()) / (2.0 * h);
    let exact = sim.cfg.grid.cell_area() * m1.iter().zip(&dir).map(|(a, b)| a.dot(b)).sum::<f64>();
    assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1.0), "{fd} {exact}");
}

#[test]
fn constant_field_step_matches_homogeneous() {
    let cfg = SimConfig { closure_mode: ClosureMode::Direct, ..small_cfg(2) };
    let sim = Simulation::new(cfg.clone(), 0).unwrap();
    let q0 = sim.minimizer.form.to_qpair() * 0.97;
    let st = FieldState::uniform(sim.cfg.grid, q0);
    let (next, _) = sim.step_pde(&st, 1e-3).unwrap();
    let h = step_homogeneous(&q0, &cfg, 1e-3).unwrap();
    for q in &next.q {
        assert!((*q - h).norm() < 1e-12);
    }
    assert!((h - q0).norm() > 1e-6);
}

#[test]
fn homogeneous_relaxation() {
    let cfg = SimConfig::default();
    let sim = Simulation::new(small_cfg(2), 0).unwrap();
    let qm = sim.minimizer.form.to_qpair();
    let fixed = step_homogeneous(&qm, &cfg, 1e-3).unwrap();
    assert!((fixed - qm).norm() < 1e-12);
    let traj = relax(&(qm * 0.9), &cfg, 4e-3, 120).unwrap();
    assert!(traj.windows(2).all(|w| w[1].2 <= w[0].2 + 1e-13));
    assert!(traj[1].2 < traj[0].2);
    let last = traj.last().unwrap().1;
    assert!(bulk_gradient(&last, &cfg.bulk, default_rule()).unwrap().norm() < 1e-8);
    let fit = crate::equilibrium::biaxial_fit(&last);
    assert!((fit.to_qpair() - last).norm() < 1e-6);
}

#[test]
fn velocity_projection_and_snapshot_roundtrip() {
    let sim = Simulation::new(small_cfg(8), 0).unwrap();
    let st = with_velocity(&sim, modulated(&sim, 0.2), 0.1);
    assert!(sim.divergence_norm(&st.v) < 1e-12);
    let mut buf = Vec::new();
    st.write_snapshot(&mut buf).unwrap();
    assert_eq!(buf.len(), 24 + 64 * 13 * 8);
    assert_eq!(&buf[..4], b"QT2D");
    let back = FieldState::read_snapshot(&mut buf.as_slice(), st.grid).unwrap();
    assert_eq!(back, st);
}

#[test]
fn energy_identity_short_run() {
    let mut cfg = small_cfg(16);
    cfg.t_end = 0.02;
    cfg.samples = 2;
    let sim = Simulation::new(cfg.clone(), 0).unwrap();
    let st = with_velocity(&sim, modulated(&sim, 0.3), 0.2);
    let dt = sim.suggest_dt().unwrap();
    let a = Simulation::new(SimConfig { dt: Some(dt), ..cfg.clone() }, 0).unwrap().run(&st, |_, _| Ok(())).unwrap();
    let b = Simulation::new(SimConfig { dt: Some(dt / 2.0), ..cfg }, 0).unwrap().run(&st, |_, _| Ok(())).unwrap();
    assert_eq!(a.rejected, 0);
    assert!(a.max_energy_increase_rate() < 0.0);
    assert!(a.reports.iter().all(|r| r.diss_mu >= 0.0 && r.diss_p >= -1e-12 && r.diss_visc >= 0.0));
    let (ra, rb) = (a.energy_residual().abs(), b.energy_residual().abs());
    assert!(ra < 1e-6 * a.reports[0].total.abs(), "{ra}");
    assert!(ra / rb > 8.0, "{ra} {rb}");
    let last = b.final_state;
    assert!(sim.divergence_norm(&last.v) < 1e-12);
}

#[test]
fn config_round_trip_and_defaults() {
    let cfg = SimConfig::default();
    assert!(cfg.validate().is_ok());
    let s = serde_json::to_string(&cfg).unwrap();
    let back: SimConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, cfg);
    let err = serde_json::from_str::<SimConfig>(r#"{"epsilon": 0.1, "bogus": 1}"#);
    assert!(err.is_err());
    let bad = SimConfig { elastic: ElasticCoefficients { c24: 2.0, ..Default::default() }, ..SimConfig::default() };
    assert!(bad.validate().is_err());
}
