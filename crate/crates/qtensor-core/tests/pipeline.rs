use qtensor_core::dynamics::{direct_operators, energy_csv, FieldState, Grid, SimConfig, Simulation};
use qtensor_core::equilibrium::{find_minimizer, hessian_spectrum, verify_manifold, BulkCoefficients};
use qtensor_core::limit::{modulated_field, project_to_manifold};
use qtensor_core::so3::default_rule;
use qtensor_core::tensor::{rotation_matrix, strictly_inside, Vec3};

fn small(n: usize) -> SimConfig {
    SimConfig { grid: Grid { nx: n, ny: n, ..Grid::default() }, t_end: 0.01, samples: 2, ..SimConfig::default() }
}

#[test]
fn minimizer_spectrum_and_projection_agree() {
    let c = BulkCoefficients::reference_biaxial();
    let m = find_minimizer(&c, default_rule(), 8, 0).unwrap();
    let s = hessian_spectrum(&m.form, &c, default_rule(), 1e-6).unwrap();
    assert_eq!(s.kernel_dim, 3);
    // A rotated minimizer projects back onto itself at zero distance.
    let r = rotation_matrix(&Vec3::new(0.3, -0.2, 0.9));
    let q = m.form.to_qpair().rotate(&r);
    let p = project_to_manifold(&q, &m.form);
    assert!(p.converged);
    assert!(p.distance < 1e-10, "{}", p.distance);
    assert!((p.q0 - q).norm() < 1e-10);
}

#[test]
fn verify_report_matches_spectrum() {
    let c = BulkCoefficients::reference_biaxial();
    let v = verify_manifold(&c, default_rule(), 8, 0).unwrap();
    assert!(v.pass);
    let m = find_minimizer(&c, default_rule(), 8, 0).unwrap();
    let s = hessian_spectrum(&m.form, &c, default_rule(), 1e-6).unwrap();
    assert_eq!(v.eigenvalues, s.eigenvalues);
    assert_eq!(v.smallest_positive, s.smallest_positive());
}

#[test]
fn uniaxial_minimizer_has_two_dim_kernel() {
    let c = BulkCoefficients::reference_uniaxial();
    let v = verify_manifold(&c, default_rule(), 8, 0).unwrap();
    assert_eq!(v.kernel_dim, 2);
    assert!(!v.pass);
    assert!(v.minimizer.b1.abs() < 1e-8 && v.minimizer.b2.abs() < 1e-8);
}

#[test]
fn short_run_dissipates_and_snapshots_round_trip() {
    let sim = Simulation::new(small(16), 0).unwrap();
    let (_, init) = modulated_field(&sim, 0.4, 0.1);
    assert!(init.q.iter().all(|q| strictly_inside(q, sim.cfg.delta)));
    let summary = sim.run(&init, |_, _| Ok(())).unwrap();
    assert_eq!(summary.reports.len(), 3);
    assert!(summary.max_energy_increase_rate() <= 1e-9);
    assert!(summary.energy_residual().abs() < 1e-6 * summary.reports[0].total.abs());
    let csv = energy_csv(&summary.reports);
    assert_eq!(csv.lines().next(), Some("time,kinetic,bulk,elastic,total,diss_mu,diss_visc,diss_p"));
    let mut buf = Vec::new();
    summary.final_state.write_snapshot(&mut buf).unwrap();
    let back = FieldState::read_snapshot(&mut buf.as_slice(), sim.cfg.grid).unwrap();
    assert_eq!(back, summary.final_state);
}

#[test]
fn table_operators_are_frame_independent_on_the_manifold() {
    let sim = Simulation::new(small(8), 0).unwrap();
    let (_, st) = modulated_field(&sim, 0.5, 0.0);
    let ops = sim.operators(&st.q).unwrap();
    let first = ops[0].reference.m;
    let mut worst = 0.0f64;
    for (op, q) in ops.iter().zip(&st.q) {
        assert!((op.reference.m - first).norm() < 1e-9 * first.norm());
        let d = direct_operators(q, sim.cfg.closure_route, &sim.cfg.params).unwrap();
        worst = worst.max((op.m_lab() - d.m_lab()).norm() / d.m_lab().norm());
    }
    // Interpolation at the cell centre carries an O(spacing²) error.
    assert!(worst < 1e-2, "{worst:.3e}");
}
