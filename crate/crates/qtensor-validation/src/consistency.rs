//! Pointwise checks: conjugate round trip, convexity and positivity, derivative consistency.

use qtensor_core::closure::{assemble_operators, closure, closure_quasi_detailed, ClosureRoute, PhysicalParams};
use qtensor_core::dynamics::{Grid, SimConfig, Simulation};
use qtensor_core::entropy::{
    entropy_grad, entropy_hess, f_orig, log_partition, moments, moments_and_covariance, solve_conjugate, xi2,
    xi2_grad, xi2_hess, ConjugatePair, EntropyKind,
};
use qtensor_core::equilibrium::{bulk_energy, bulk_gradient, bulk_hessian, BulkCoefficients};
use qtensor_core::so3::{default_rule, QuadratureRule};
use qtensor_core::tensor::{QPair, Vec10};
use qtensor_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn unit10(rng: &mut ChaCha8Rng) -> Vec10 {
    let v = Vec10::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    v / v.norm()
}

/// Moments of a density with multipliers uniform in [−1.5, 1.5]¹⁰.
pub fn random_interior(rng: &mut ChaCha8Rng, rule: &QuadratureRule) -> QPair {
    let b: [f64; 10] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
    moments(&ConjugatePair::from_qpair(&QPair::from_array(&b)), rule)
}

/// Round trip B ↦ Q(B) ↦ B and ∂F_orig/∂Q = B by central differences.
pub fn conjugate_round_trip(samples: usize, seed: u64) -> Result<Outcome> {
    let rule = default_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_rt, mut worst_fd) = (0.0f64, 0.0f64);
    let h = 1e-4;
    for _ in 0..samples {
        let b = unit10(&mut rng) * (3.0 * rng.gen::<f64>());
        let q = moments(&ConjugatePair::from_qpair(&QPair::from_vec(&b)), rule);
        let back = solve_conjugate(&q, rule)?.to_qpair().to_vec();
        worst_rt = worst_rt.max((back - b).norm());
        let x = q.to_vec();
        let f = |v: Vec10| f_orig(&QPair::from_vec(&v), rule);
        let mut fd = Vec10::zeros();
        for i in 0..10 {
            let mut e = Vec10::zeros();
            e[i] = h;
            fd[i] = (f(x + e)? - f(x - e)?) / (2.0 * h);
        }
        worst_fd = worst_fd.max((fd - b).norm() / b.norm());
    }
    Ok(Outcome::new(
        worst_rt <= 1e-8 && worst_fd <= 1e-6,
        format!("{samples} samples, max |B' - B| = {worst_rt:.2e} (≤ 1e-8), max FD relative error {worst_fd:.2e} (≤ 1e-6)"),
    ))
}

/// Convexity of Ξ₂ and Ξ₄, positivity of the closure tensors and kinetic operators.
pub fn convexity_suite(convex_points: usize, operator_points: usize, seed: u64) -> Result<Outcome> {
    let rule = default_rule();
    let params = PhysicalParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut xi2_min, mut xi4_min) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..convex_points {
        let q = random_interior(&mut rng, rule);
        xi2_min = xi2_min.min(xi2_hess(&q)?.symmetric_eigenvalues().min());
        xi4_min = xi4_min.min(closure_quasi_detailed(&q, params.e1())?.hessian_eigenvalues[0]);
    }
    // PSD allows roundoff relative to the largest eigenvalue.
    let (mut r_rel, mut m_min, mut p_min) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut transpose_exact = true;
    for _ in 0..operator_points {
        let q = random_interior(&mut rng, rule);
        for route in [ClosureRoute::Maxent, ClosureRoute::Quasi] {
            let (_, ct) = closure(&q, route, params.e1())?;
            for t in &ct.r {
                let eig = t.st_block().symmetric_eigenvalues();
                r_rel = r_rel.min(eig.min() / eig.amax().max(1e-300));
            }
            let ops = assemble_operators(&ct, &params);
            m_min = m_min.min(ops.m.symmetric_eigenvalues().min());
            p_min = p_min.min(ops.p.st_block().symmetric_eigenvalues().min());
            transpose_exact &= ops.n_mat() == ops.v_mat.transpose()
                && ops.n[0] == ops.v[0].transpose()
                && ops.n[1] == ops.v[1].transpose();
        }
    }
    let pass = xi2_min > 0.0 && xi4_min > 0.0 && r_rel >= -1e-12 && m_min > 0.0 && p_min > 0.0 && transpose_exact;
    Ok(Outcome::new(
        pass,
        format!(
            "min eig Ξ₂'' {xi2_min:.3e}, Ξ₄'' {xi4_min:.3e} over {convex_points} points; \
             min relative eig of ℛ {r_rel:.2e}, ℳ {m_min:.3e}, 𝒫 {p_min:.3e}, 𝒩 = 𝒱ᵀ exact: {transpose_exact} \
             over {operator_points} points x 2 routes"
        ),
    ))
}

/// Relative central-difference error of a directional derivative at step h, and the
/// roundoff level 8·ε_mach·|f|/(h·|f'|) that the error cannot go below.
type Probe<'a> = Box<dyn Fn(f64) -> Result<(f64, f64)> + 'a>;

const ROUNDOFF: f64 = 8.0 * f64::EPSILON;

/// One value/derivative pair probed along a fixed direction at a fixed point.
struct Pair<'a> {
    name: String,
    probe: Probe<'a>,
}

fn scalar_pair<'a>(
    name: &str,
    x: Vec10,
    d: Vec10,
    f: impl Fn(&Vec10) -> Result<f64> + 'a,
    g: impl Fn(&Vec10) -> Result<Vec10> + 'a,
) -> Pair<'a> {
    Pair {
        name: name.to_string(),
        probe: Box::new(move |h| {
            let gx = g(&x)?;
            let (fp, fm) = (f(&(x + d * h))?, f(&(x - d * h))?);
            let scale = gx.norm().max(1e-300);
            let fd = (fp - fm) / (2.0 * h);
            Ok(((fd - gx.dot(&d)).abs() / scale, ROUNDOFF * fp.abs().max(fm.abs()) / (h * scale)))
        }),
    }
}

fn jacobian_pair<'a>(
    name: &str,
    x: Vec10,
    d: Vec10,
    g: impl Fn(&Vec10) -> Result<Vec10> + 'a,
    h_of: impl Fn(&Vec10) -> Result<qtensor_core::tensor::Mat10> + 'a,
) -> Pair<'a> {
    Pair {
        name: name.to_string(),
        probe: Box::new(move |h| {
            let hx = h_of(&x)?;
            let (gp, gm) = (g(&(x + d * h))?, g(&(x - d * h))?);
            let scale = hx.norm().max(1e-300);
            let fd = (gp - gm) / (2.0 * h);
            Ok(((fd - hx * d).norm() / scale, ROUNDOFF * gp.norm().max(gm.norm()) / (h * scale)))
        }),
    }
}

/// Errors of one pair at the step sizes of [`STEPS`], with the roundoff level at each.
#[derive(Clone, Debug)]
pub struct FdRecord {
    pub name: String,
    pub errors: [f64; 4],
    pub roundoff: [f64; 4],
}

impl FdRecord {
    /// log₂ of the error ratio under halving from STEPS[2k].
    pub fn order(&self, k: usize) -> f64 {
        (self.errors[2 * k] / self.errors[2 * k + 1]).log2()
    }

    /// Truncation error dominates roundoff at both steps of pair k.
    pub fn resolved(&self, k: usize) -> bool {
        (0..2).all(|j| self.errors[2 * k + j] >= 10.0 * self.roundoff[2 * k + j])
    }
}

/// h, h/2 for each base step.
pub const STEPS: [f64; 4] = [1e-4, 5e-5, 1e-5, 5e-6];

pub fn derivative_records(points: usize, seed: u64) -> Result<Vec<FdRecord>> {
    let rule = default_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quasi = BulkCoefficients::reference_biaxial();
    let original = BulkCoefficients { entropy: EntropyKind::Original, ..quasi };
    let qp = |v: &Vec10| QPair::from_vec(v);
    let mut records = Vec::new();
    for p in 0..points {
        let x = random_interior(&mut rng, rule).to_vec();
        let b = Vec10::from_fn(|_, _| rng.gen_range(-1.5..1.5));
        let d = unit10(&mut rng);
        let tag = |s: &str| format!("{s}#{p}");
        let pairs: Vec<Pair> = vec![
            scalar_pair(&tag("xi2"), x, d, |v| xi2(&qp(v)), |v| Ok(xi2_grad(&qp(v))?.to_vec())),
            jacobian_pair(&tag("xi2_grad"), x, d, |v| Ok(xi2_grad(&qp(v))?.to_vec()), |v| xi2_hess(&qp(v))),
            scalar_pair(
                &tag("f_orig"),
                x,
                d,
                |v| f_orig(&qp(v), rule),
                |v| Ok(entropy_grad(&qp(v), EntropyKind::Original, rule)?.to_vec()),
            ),
            jacobian_pair(
                &tag("f_orig_grad"),
                x,
                d,
                |v| Ok(entropy_grad(&qp(v), EntropyKind::Original, rule)?.to_vec()),
                |v| entropy_hess(&qp(v), EntropyKind::Original, rule),
            ),
            scalar_pair(
                &tag("bulk_quasi"),
                x,
                d,
                |v| bulk_energy(&qp(v), &quasi, rule),
                |v| Ok(bulk_gradient(&qp(v), &quasi, rule)?.to_vec()),
            ),
            jacobian_pair(
                &tag("bulk_quasi_grad"),
                x,
                d,
                |v| Ok(bulk_gradient(&qp(v), &quasi, rule)?.to_vec()),
                |v| bulk_hessian(&qp(v), &quasi, rule),
            ),
            scalar_pair(
                &tag("bulk_original"),
                x,
                d,
                |v| bulk_energy(&qp(v), &original, rule),
                |v| Ok(bulk_gradient(&qp(v), &original, rule)?.to_vec()),
            ),
            jacobian_pair(
                &tag("bulk_original_grad"),
                x,
                d,
                |v| Ok(bulk_gradient(&qp(v), &original, rule)?.to_vec()),
                |v| bulk_hessian(&qp(v), &original, rule),
            ),
            scalar_pair(
                &tag("log_partition"),
                b,
                d,
                |v| Ok(log_partition(&ConjugatePair::from_qpair(&qp(v)), rule)),
                |v| Ok(moments(&ConjugatePair::from_qpair(&qp(v)), rule).to_vec()),
            ),
            jacobian_pair(
                &tag("moments"),
                b,
                d,
                |v| Ok(moments(&ConjugatePair::from_qpair(&qp(v)), rule).to_vec()),
                |v| Ok(moments_and_covariance(&ConjugatePair::from_qpair(&qp(v)), rule).1),
            ),
        ];
        for pair in pairs {
            let (mut errors, mut roundoff) = ([0.0; 4], [0.0; 4]);
            for (k, h) in STEPS.iter().enumerate() {
                (errors[k], roundoff[k]) = (pair.probe)(*h)?;
            }
            records.push(FdRecord { name: pair.name, errors, roundoff });
        }
    }
    records.extend(elastic_records(seed)?);
    Ok(records)
}

/// Elastic energy against the elastic force on a small periodic grid.
fn elastic_records(seed: u64) -> Result<Vec<FdRecord>> {
    let cfg = SimConfig { grid: Grid { nx: 8, ny: 8, ..Grid::default() }, ..SimConfig::default() };
    let sim = Simulation::new(cfg, seed)?;
    let g = sim.cfg.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let base = sim.minimizer.form.to_qpair();
    let q: Vec<QPair> = (0..g.len()).map(|_| base + QPair::from_vec(&(unit10(&mut rng) * 0.05))).collect();
    let d: Vec<QPair> = (0..g.len()).map(|_| QPair::from_vec(&(unit10(&mut rng) * (1.0 / (g.len() as f64).sqrt())))).collect();
    let energy = |s: f64| -> Result<f64> {
        let qs: Vec<QPair> = q.iter().zip(&d).map(|(a, b)| *a + *b * s).collect();
        let force = sim.elastic_force(&qs);
        Ok(0.5 * g.cell_area() * qs.iter().zip(&force).map(|(a, b)| a.dot(b)).sum::<f64>())
    };
    let force = sim.elastic_force(&q);
    let exact = g.cell_area() * force.iter().zip(&d).map(|(a, b)| a.dot(b)).sum::<f64>();
    let scale = g.cell_area() * force.iter().map(|f| f.dot(f)).sum::<f64>().sqrt();
    let (mut errors, mut roundoff) = ([0.0; 4], [0.0; 4]);
    for (k, h) in STEPS.iter().enumerate() {
        let (ep, em) = (energy(*h)?, energy(-*h)?);
        errors[k] = ((ep - em) / (2.0 * h) - exact).abs() / scale;
        roundoff[k] = ROUNDOFF * ep.abs().max(em.abs()) / (h * scale);
    }
    Ok(vec![FdRecord { name: "elastic".into(), errors, roundoff }])
}

/// Central differences against every analytic gradient and Hessian. The relative error must stay
/// below 1e-5 at h = 1e-5, and halving h = 1e-4 must show order 2 wherever the truncation error
/// is resolved above roundoff. At h = 1e-5 the error of iteratively solved values already sits at
/// their solver noise, so the order there is reported only.
pub fn derivative_consistency(points: usize, seed: u64) -> Result<Outcome> {
    let records = derivative_records(points, seed)?;
    let mut failures = Vec::new();
    let mut worst_err = 0.0f64;
    let mut range = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    let mut resolved = [0usize; 2];
    for r in &records {
        worst_err = worst_err.max(r.errors[2]);
        if r.errors[2] >= 1e-5 {
            failures.push(format!("{} error {:.2e} at h = 1e-5", r.name, r.errors[2]));
        }
        for k in 0..2 {
            if r.resolved(k) {
                let o = r.order(k);
                resolved[k] += 1;
                range[k] = (range[k].0.min(o), range[k].1.max(o));
                if k == 0 && (o - 2.0).abs() > 0.2 {
                    failures.push(format!("{} order {o:.2} from h = 1e-4", r.name));
                }
            }
        }
    }
    let pairs = records.iter().filter(|r| r.name.ends_with("#0")).count() + 1;
    let mut detail = format!(
        "{pairs} value/derivative pairs at {points} points: max relative error at h = 1e-5 {worst_err:.2e} (< 1e-5); \
         order from h = 1e-4 in [{:.2}, {:.2}] over {} resolved pairs (|order - 2| ≤ 0.2), \
         {} unresolved at roundoff; from h = 1e-5 in [{:.2}, {:.2}] over {} (not gated)",
        range[0].0,
        range[0].1,
        resolved[0],
        records.len() - resolved[0],
        range[1].0,
        range[1].1,
        resolved[1]
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join(", ")));
    }
    Ok(Outcome::new(failures.is_empty() && resolved[0] > 0, detail))
}
