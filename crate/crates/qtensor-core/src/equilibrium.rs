//! Bulk energy, its minimizers, and the Hessian kernel structure at a minimizer.

use nalgebra::{Cholesky, DMatrix, SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{entropy_all, entropy_grad, entropy_value, EntropyKind};
use crate::so3::QuadratureRule;
use crate::tensor::{
    domain_margin, lie_derivative, BiaxialMap, Frame, FrameMap, Mat10, Mat3, QPair, SymTraceless2, Vec10,
};
use crate::{Error, Result};

/// Coefficients of the quadratic part and the entropy term of the bulk energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BulkCoefficients {
    pub c02: f64,
    pub c03: f64,
    pub c04: f64,
    pub entropy: EntropyKind,
}

impl Default for BulkCoefficients {
    fn default() -> Self {
        Self::reference_biaxial()
    }
}

impl BulkCoefficients {
    /// The reference biaxial coefficient set (−35ν, −20ν, −20ν) with ν = 5/9.
    pub fn reference_biaxial() -> Self {
        let nu = 5.0 / 9.0;
        Self { c02: -35.0 * nu, c03: -20.0 * nu, c04: -20.0 * nu, entropy: EntropyKind::Quasi { nu } }
    }

    /// A set whose minimizer is uniaxial: (−35ν, 20ν, 0) with ν = 5/9.
    pub fn reference_uniaxial() -> Self {
        let nu = 5.0 / 9.0;
        Self { c02: -35.0 * nu, c03: 20.0 * nu, c04: 0.0, entropy: EntropyKind::Quasi { nu } }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.c02, self.c03, self.c04].iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("bulk coefficients must be finite".into()));
        }
        if let EntropyKind::Quasi { nu } = self.entropy {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::InvalidArgument(format!("bulk.entropy.nu must be positive (got {nu})")));
            }
        }
        Ok(())
    }

    /// D0 applied blockwise.
    pub fn d0(&self, q: &QPair) -> QPair {
        QPair::new(q.q1 * self.c02 + q.q2 * self.c04, q.q1 * self.c04 + q.q2 * self.c03)
    }

    fn d0_matrix(&self) -> Mat10 {
        let mut m = Mat10::zeros();
        for i in 0..5 {
            m[(i, i)] = self.c02;
            m[(i + 5, i + 5)] = self.c03;
            m[(i, i + 5)] = self.c04;
            m[(i + 5, i)] = self.c04;
        }
        m
    }
}

fn quadratic(q: &QPair, c: &BulkCoefficients) -> f64 {
    0.5 * q.dot(&c.d0(q))
}

/// F_b = F_entropy + ½(c02|Q1|² + c03|Q2|² + 2c04 Q1·Q2).
pub fn bulk_energy(q: &QPair, c: &BulkCoefficients, rule: &QuadratureRule) -> Result<f64> {
    Ok(entropy_value(q, c.entropy, rule)? + quadratic(q, c))
}

/// 𝒥(Q) = 𝒮∂F_entropy/∂Q + D0 Q.
pub fn bulk_gradient(q: &QPair, c: &BulkCoefficients, rule: &QuadratureRule) -> Result<QPair> {
    Ok(entropy_grad(q, c.entropy, rule)? + c.d0(q))
}

/// ℋ_Q in the fixed 10-dim coordinates.
pub fn bulk_hessian(q: &QPair, c: &BulkCoefficients, rule: &QuadratureRule) -> Result<Mat10> {
    Ok(bulk_all(q, c, rule)?.2)
}

/// Value, gradient and Hessian together.
pub fn bulk_all(q: &QPair, c: &BulkCoefficients, rule: &QuadratureRule) -> Result<(f64, Vec10, Mat10)> {
    let (f, g, h) = entropy_all(q, c.entropy, rule)?;
    let h = h + c.d0_matrix();
    Ok((f + quadratic(q, c), g + c.d0(q).to_vec(), (h + h.transpose()) * 0.5))
}

/// Q_i = s_i(n1² − I/3) + b_i(n2² − n3²) in a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiaxialForm {
    pub s1: f64,
    pub b1: f64,
    pub s2: f64,
    pub b2: f64,
    pub frame: Frame,
}

impl BiaxialForm {
    pub fn new(s1: f64, b1: f64, s2: f64, b2: f64) -> Self {
        Self { s1, b1, s2, b2, frame: Frame::identity() }
    }

    pub fn scalars(&self) -> [f64; 4] {
        [self.s1, self.b1, self.s2, self.b2]
    }

    pub fn map(&self) -> BiaxialMap {
        BiaxialMap { s1: self.s1, b1: self.b1, s2: self.s2, b2: self.b2 }
    }

    pub fn to_qpair(&self) -> QPair {
        self.map().eval(&self.frame)
    }

    pub fn with_frame(&self, frame: Frame) -> Self {
        Self { frame, ..*self }
    }

    /// Smallest of the nine quantities 2s_i/3+1/3 and 1/3−s_i/3±b_i (i=1,2,3).
    pub fn range_margin(&self) -> f64 {
        let s = [self.s1, self.s2, -self.s1 - self.s2];
        let b = [self.b1, self.b2, -self.b1 - self.b2];
        let mut m = f64::INFINITY;
        for i in 0..3 {
            m = m.min(2.0 * s[i] / 3.0 + 1.0 / 3.0);
            m = m.min(1.0 / 3.0 - s[i] / 3.0 + b[i]);
            m = m.min(1.0 / 3.0 - s[i] / 3.0 - b[i]);
        }
        m
    }

    /// Diagonal entries of Q1, Q2 in the frame.
    fn eigen_triples(&self) -> [[f64; 3]; 2] {
        let tri = |s: f64, b: f64| [2.0 * s / 3.0, -s / 3.0 + b, -s / 3.0 - b];
        [tri(self.s1, self.b1), tri(self.s2, self.b2)]
    }

    /// Relabels the frame axes: n1 chosen to minimize |b1|+|b2|, then n2↔n3 so that b2 ≥ 0.
    pub fn canonical(&self) -> Self {
        let ev = self.eigen_triples();
        let m = self.frame.matrix();
        let mut best: Option<(f64, [usize; 3])> = None;
        for first in 0..3 {
            let rest: Vec<usize> = (0..3).filter(|&i| i != first).collect();
            let perm = [first, rest[0], rest[1]];
            let b1 = (ev[0][perm[1]] - ev[0][perm[2]]) / 2.0;
            let b2 = (ev[1][perm[1]] - ev[1][perm[2]]) / 2.0;
            let score = b1.abs() + b2.abs();
            if best.map_or(true, |(s, _)| score < s - 1e-14) {
                best = Some((score, perm));
            }
        }
        let mut perm = best.expect("three candidates").1;
        let b2 = (ev[1][perm[1]] - ev[1][perm[2]]) / 2.0;
        let b1 = (ev[0][perm[1]] - ev[0][perm[2]]) / 2.0;
        if b2 < 0.0 || (b2 == 0.0 && b1 < 0.0) {
            perm.swap(1, 2);
        }
        let mut r = Mat3::from_columns(&[m.column(perm[0]), m.column(perm[1]), m.column(perm[2])]);
        if r.determinant() < 0.0 {
            r.column_mut(2).neg_mut();
        }
        Self {
            s1: 1.5 * ev[0][perm[0]],
            b1: (ev[0][perm[1]] - ev[0][perm[2]]) / 2.0,
            s2: 1.5 * ev[1][perm[0]],
            b2: (ev[1][perm[1]] - ev[1][perm[2]]) / 2.0,
            frame: Frame::from_matrix_lossy(r),
        }
    }
}

/// Columns: Q(s1), Q(b1), Q(s2), Q(b2) in the identity frame.
fn reduced_jacobian() -> SMatrix<f64, 10, 4> {
    let lb = crate::tensor::local_basis(&Frame::identity());
    let (a, b) = (SymTraceless2::from_mat(&lb.s[0]), SymTraceless2::from_mat(&lb.s[1]));
    let mut j = SMatrix::<f64, 10, 4>::zeros();
    for i in 0..5 {
        j[(i, 0)] = a.coords[i];
        j[(i, 1)] = b.coords[i];
        j[(5 + i, 2)] = a.coords[i];
        j[(5 + i, 3)] = b.coords[i];
    }
    j
}

fn reduced_eval(
    x: &SVector<f64, 4>,
    c: &BulkCoefficients,
    rule: &QuadratureRule,
) -> Option<(f64, SVector<f64, 4>, SMatrix<f64, 4, 4>)> {
    let form = BiaxialForm::new(x[0], x[1], x[2], x[3]);
    if form.range_margin() <= 0.0 {
        return None;
    }
    let (f, g, h) = bulk_all(&form.to_qpair(), c, rule).ok()?;
    let j = reduced_jacobian();
    Some((f, j.transpose() * g, j.transpose() * h * j))
}

fn reduced_value(x: &SVector<f64, 4>, c: &BulkCoefficients, rule: &QuadratureRule) -> Option<f64> {
    let form = BiaxialForm::new(x[0], x[1], x[2], x[3]);
    if form.range_margin() <= 0.0 {
        return None;
    }
    bulk_energy(&form.to_qpair(), c, rule).ok()
}

/// Levenberg–Marquardt style trust-region Newton on the reduced scalars.
fn reduced_newton(start: SVector<f64, 4>, c: &BulkCoefficients, rule: &QuadratureRule) -> Option<SVector<f64, 4>> {
    let mut x = start;
    let (mut f, mut g, mut h) = reduced_eval(&x, c, rule)?;
    let mut lambda = 1e-3;
    for _ in 0..300 {
        if g.norm() < 1e-13 {
            return Some(x);
        }
        let mut moved = false;
        for _ in 0..60 {
            let shifted = h + SMatrix::<f64, 4, 4>::identity() * lambda;
            let step = match Cholesky::new(shifted) {
                Some(ch) => ch.solve(&(-g)),
                None => {
                    lambda = (lambda * 10.0).max(1e-3);
                    continue;
                }
            };
            let trial = x + step;
            match reduced_value(&trial, c, rule) {
                Some(ft) if ft < f || (ft <= f + 1e-14 * f.abs() && step.norm() < 1e-12) => {
                    x = trial;
                    let e = reduced_eval(&x, c, rule)?;
                    f = e.0;
                    g = e.1;
                    h = e.2;
                    lambda = (lambda * 0.2).max(1e-14);
                    moved = true;
                    break;
                }
                _ => lambda = (lambda * 10.0).max(1e-3),
            }
        }
        if !moved {
            return (g.norm() < 1e-9).then_some(x);
        }
    }
    (g.norm() < 1e-9).then_some(x)
}

/// Newton polish in the full 10-dim space, restricted to non-kernel directions.
fn polish(q: QPair, c: &BulkCoefficients, rule: &QuadratureRule) -> Result<(QPair, f64)> {
    let mut q = q;
    let mut jn = bulk_gradient(&q, c, rule)?.norm();
    for _ in 0..8 {
        if jn < 1e-13 {
            break;
        }
        let (_, g, h) = bulk_all(&q, c, rule)?;
        let eig = SymmetricEigen::new(h);
        let scale = eig.eigenvalues.amax();
        let mut step = Vec10::zeros();
        for k in 0..10 {
            let lam = eig.eigenvalues[k];
            if lam.abs() > 1e-7 * scale {
                let v = eig.eigenvectors.column(k);
                step -= v * (v.dot(&g) / lam);
            }
        }
        let trial = QPair::from_vec(&(q.to_vec() + step));
        if domain_margin(&trial) <= 0.0 {
            break;
        }
        let tn = bulk_gradient(&trial, c, rule)?.norm();
        if tn >= jn {
            break;
        }
        q = trial;
        jn = tn;
    }
    Ok((q, jn))
}

/// Reads (s_i, b_i) of a commuting pair in the eigenframe of Q1 + αQ2.
pub fn biaxial_fit(q: &QPair) -> BiaxialForm {
    let (a, b) = q.mats();
    let eig = SymmetricEigen::new(a + b * 0.37);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut r = Mat3::from_columns(&[
        eig.eigenvectors.column(idx[0]),
        eig.eigenvectors.column(idx[1]),
        eig.eigenvectors.column(idx[2]),
    ]);
    if r.determinant() < 0.0 {
        r.column_mut(2).neg_mut();
    }
    let (ra, rb) = (r.transpose() * a * r, r.transpose() * b * r);
    BiaxialForm {
        s1: 1.5 * ra[(0, 0)],
        b1: 0.5 * (ra[(1, 1)] - ra[(2, 2)]),
        s2: 1.5 * rb[(0, 0)],
        b2: 0.5 * (rb[(1, 1)] - rb[(2, 2)]),
        frame: Frame::from_matrix_lossy(r),
    }
}

/// A stationary point found by [`find_minimizer`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Minimizer {
    pub form: BiaxialForm,
    pub energy: f64,
    /// ‖𝒥‖ after polishing.
    pub gradient_norm: f64,
    /// ‖Q1Q2 − Q2Q1‖.
    pub commutator: f64,
}

fn random_feasible(rng: &mut ChaCha8Rng) -> SVector<f64, 4> {
    loop {
        let x = SVector::<f64, 4>::new(
            rng.gen_range(-0.5..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..1.0),
            rng.gen_range(-0.5..0.5),
        );
        if BiaxialForm::new(x[0], x[1], x[2], x[3]).range_margin() > 0.02 {
            return x;
        }
    }
}

/// Multi-start search for the lowest stationary point of the bulk energy.
pub fn find_minimizer(c: &BulkCoefficients, rule: &QuadratureRule, starts: usize, seed: u64) -> Result<Minimizer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The deterministic start (0.5, 0, 0.5, 0) lies outside the admissible set; it is pulled
    // toward the origin until strictly inside.
    let mut det = SVector::<f64, 4>::new(0.5, 0.0, 0.5, 0.0);
    while BiaxialForm::new(det[0], det[1], det[2], det[3]).range_margin() <= 0.02 {
        det *= 0.9;
    }
    let mut inits = vec![det];
    inits.extend((0..starts).map(|_| random_feasible(&mut rng)));
    let mut best: Option<Minimizer> = None;
    for x0 in inits {
        let Some(x) = reduced_newton(x0, c, rule) else { continue };
        let form = BiaxialForm::new(x[0], x[1], x[2], x[3]);
        let Ok((q, jn)) = polish(form.to_qpair(), c, rule) else { continue };
        if jn > 1e-8 {
            continue;
        }
        // The polish moves only along non-kernel directions, so Q stays biaxial in the identity frame.
        let fitted = biaxial_fit(&q).canonical();
        let energy = bulk_energy(&q, c, rule)?;
        let cand = Minimizer { form: fitted, energy, gradient_norm: jn, commutator: q.commutator_norm() };
        let better = match &best {
            None => true,
            Some(b) => {
                let tol = 1e-10 * b.energy.abs().max(1.0);
                cand.energy < b.energy - tol
                    || ((cand.energy - b.energy).abs() <= tol
                        && cand.form.scalars().partial_cmp(&b.form.scalars()) == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::SearchFailed("no start converged to a stationary point".into()))
}

/// Eigen-decomposition of ℋ at a stationary point, with the analytic kernel.
#[derive(Clone, Debug)]
pub struct HessianSpectrum {
    pub hessian: Mat10,
    /// Ascending.
    pub eigenvalues: [f64; 10],
    pub eigenvectors: Vec<QPair>,
    /// Numerical kernel dimension: eigenvalues with |λ| < zero_tol.
    pub kernel_dim: usize,
    /// ξ_k = ℒ_k Q⁽⁰⁾, k = 1..3.
    pub xi: [QPair; 3],
    /// Orthonormalized span of the nonzero ξ_k.
    pub kernel_basis: Vec<Vec10>,
    /// Largest principal angle between span{ξ} and the numerical kernel (π/2 if dimensions differ).
    pub xi_angle: f64,
    /// max_k ‖ℋξ_k‖ / (‖ℋ‖‖ξ_k‖) over nonzero ξ_k.
    pub xi_residual: f64,
    /// Orthonormal eigenbasis of ℋ on the complement of span{ξ}.
    pub positive_basis: Vec<Vec10>,
    pub positive_eigenvalues: Vec<f64>,
}

impl HessianSpectrum {
    pub fn smallest_positive(&self) -> Option<f64> {
        self.eigenvalues.get(self.kernel_dim).copied().filter(|l| *l > 0.0)
    }

    pub fn project_in(&self, q: &QPair) -> QPair {
        let v = q.to_vec();
        let mut out = Vec10::zeros();
        for x in &self.kernel_basis {
            out += x * x.dot(&v);
        }
        QPair::from_vec(&out)
    }

    pub fn project_out(&self, q: &QPair) -> QPair {
        let v = q.to_vec();
        let mut out = Vec10::zeros();
        for e in &self.positive_basis {
            out += e * e.dot(&v);
        }
        QPair::from_vec(&out)
    }

    /// ℋ⁻¹ on the complement of the kernel: Σ e_j (e_j·q)/λ_j.
    pub fn solve_out(&self, q: &QPair) -> QPair {
        let v = q.to_vec();
        let mut out = Vec10::zeros();
        for (e, l) in self.positive_basis.iter().zip(&self.positive_eigenvalues) {
            out += e * (e.dot(&v) / l);
        }
        QPair::from_vec(&out)
    }

    pub fn apply(&self, q: &QPair) -> QPair {
        QPair::from_vec(&(self.hessian * q.to_vec()))
    }

    /// The same spectrum for the rotated configuration R Q⁽⁰⁾ Rᵀ.
    pub fn rotated(&self, r: &Mat3) -> Self {
        let d5 = crate::tensor::st_rotation(r);
        let mut d = Mat10::zeros();
        d.fixed_view_mut::<5, 5>(0, 0).copy_from(&d5);
        d.fixed_view_mut::<5, 5>(5, 5).copy_from(&d5);
        let rot = |v: &Vec10| d * v;
        Self {
            hessian: d * self.hessian * d.transpose(),
            eigenvalues: self.eigenvalues,
            eigenvectors: self.eigenvectors.iter().map(|q| QPair::from_vec(&rot(&q.to_vec()))).collect(),
            kernel_dim: self.kernel_dim,
            xi: self.xi.map(|q| QPair::from_vec(&rot(&q.to_vec()))),
            kernel_basis: self.kernel_basis.iter().map(rot).collect(),
            xi_angle: self.xi_angle,
            xi_residual: self.xi_residual,
            positive_basis: self.positive_basis.iter().map(rot).collect(),
            positive_eigenvalues: self.positive_eigenvalues.clone(),
        }
    }
}

fn orthonormalize(vs: &[Vec10], tol: f64) -> Vec<Vec10> {
    let mut out: Vec<Vec10> = Vec::new();
    for v in vs {
        let mut w = *v;
        for _ in 0..2 {
            for u in &out {
                w -= u * u.dot(&w);
            }
        }
        if w.norm() > tol {
            out.push(w.normalize());
        }
    }
    out
}

/// Largest principal angle between two subspaces given by orthonormal bases.
fn subspace_angle(a: &[Vec10], b: &[Vec10]) -> f64 {
    if a.len() != b.len() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.is_empty() {
        return 0.0;
    }
    let mut resid = DMatrix::<f64>::zeros(10, a.len());
    for (j, x) in a.iter().enumerate() {
        let mut w = *x;
        for u in b {
            w -= u * u.dot(x);
        }
        resid.column_mut(j).copy_from(&w);
    }
    let s = resid.singular_values().max();
    s.min(1.0).asin()
}

pub fn hessian_spectrum(
    q0: &BiaxialForm,
    c: &BulkCoefficients,
    rule: &QuadratureRule,
    zero_tol: f64,
) -> Result<HessianSpectrum> {
    let q = q0.to_qpair();
    let (_, g, h) = bulk_all(&q, c, rule)?;
    if g.norm() >= 1e-8 {
        return Err(Error::InvalidArgument(format!("not a stationary point: |J| = {:.3e}", g.norm())));
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues: [f64; 10] = std::array::from_fn(|k| eig.eigenvalues[order[k]]);
    let vecs: Vec<Vec10> = order.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
    let numerical_kernel: Vec<Vec10> =
        vecs.iter().zip(&eigenvalues).filter(|(_, l)| l.abs() < zero_tol).map(|(v, _)| *v).collect();
    let kernel_dim = numerical_kernel.len();
    let map = q0.map();
    let xi: [QPair; 3] = std::array::from_fn(|k| lie_derivative(k + 1, &map, &q0.frame).expect("valid axis"));
    let scale = q.norm().max(1e-300);
    let kernel_basis = orthonormalize(&xi.map(|x| x.to_vec()), 1e-8 * scale);
    let h_norm = h.norm();
    let xi_residual = xi
        .iter()
        .filter(|x| x.norm() > 1e-8 * scale)
        .map(|x| (h * x.to_vec()).norm() / (h_norm * x.norm()))
        .fold(0.0, f64::max);
    let xi_angle = subspace_angle(&kernel_basis, &numerical_kernel);
    // Complement of span{ξ}, then ℋ compressed onto it.
    let mut proj = Mat10::identity();
    for x in &kernel_basis {
        proj -= x * x.transpose();
    }
    let pe = SymmetricEigen::new(proj);
    let comp: Vec<Vec10> = (0..10)
        .filter(|&k| pe.eigenvalues[k] > 0.5)
        .map(|k| pe.eigenvectors.column(k).into_owned())
        .collect();
    let m = comp.len();
    let cmat = DMatrix::<f64>::from_fn(10, m, |i, j| comp[j][i]);
    let hd = DMatrix::<f64>::from_fn(10, 10, |i, j| h[(i, j)]);
    let hc = cmat.transpose() * &hd * &cmat;
    let hc = (&hc + hc.transpose()) * 0.5;
    let ce = SymmetricEigen::new(hc);
    let mut corder: Vec<usize> = (0..m).collect();
    corder.sort_by(|&i, &j| ce.eigenvalues[i].total_cmp(&ce.eigenvalues[j]));
    let positive_basis: Vec<Vec10> = corder
        .iter()
        .map(|&k| {
            let v = &cmat * ce.eigenvectors.column(k);
            Vec10::from_iterator(v.iter().cloned())
        })
        .collect();
    let positive_eigenvalues = corder.iter().map(|&k| ce.eigenvalues[k]).collect();
    Ok(HessianSpectrum {
        hessian: h,
        eigenvalues,
        eigenvectors: vecs.iter().map(QPair::from_vec).collect(),
        kernel_dim,
        xi,
        kernel_basis,
        xi_angle,
        xi_residual,
        positive_basis,
        positive_eigenvalues,
    })
}

/// Scalars of a biaxial form, for reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FormReport {
    pub s1: f64,
    pub b1: f64,
    pub s2: f64,
    pub b2: f64,
    pub frame: Frame,
    pub energy: f64,
    pub gradient_norm: f64,
}

/// Outcome of checking that the minimizer set is a nondegenerate 3-dim manifold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub coefficients: BulkCoefficients,
    pub minimizer: FormReport,
    pub eigenvalues: [f64; 10],
    pub kernel_dim: usize,
    pub xi_angle: f64,
    pub xi_residual: f64,
    pub smallest_positive: Option<f64>,
    pub pass: bool,
}

pub fn verify_manifold(c: &BulkCoefficients, rule: &QuadratureRule, starts: usize, seed: u64) -> Result<VerifyReport> {
    let min = find_minimizer(c, rule, starts, seed)?;
    let spec = hessian_spectrum(&min.form, c, rule, 1e-6)?;
    let pass = spec.kernel_dim == 3 && spec.xi_angle < 1e-5;
    Ok(VerifyReport {
        coefficients: *c,
        minimizer: FormReport {
            s1: min.form.s1,
            b1: min.form.b1,
            s2: min.form.s2,
            b2: min.form.b2,
            frame: min.form.frame,
            energy: min.energy,
            gradient_norm: min.gradient_norm,
        },
        eigenvalues: spec.eigenvalues,
        kernel_dim: spec.kernel_dim,
        xi_angle: spec.xi_angle,
        xi_residual: spec.xi_residual,
        smallest_positive: spec.smallest_positive(),
        pass,
    })
}
