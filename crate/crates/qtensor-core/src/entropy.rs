//! The original entropy via the maximum entropy state, and the quasi-entropy Ξ₂.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::so3::{Density, QuadratureRule};
use crate::tensor::{domain_matrices, min_eigenvalue, st_basis, Mat10, Mat3, QPair, SymTraceless2, Vec10};
use crate::{Error, Result};

/// Lagrange multipliers (B1, B2) of the maximum entropy state.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ConjugatePair {
    pub b1: SymTraceless2,
    pub b2: SymTraceless2,
}

impl ConjugatePair {
    pub fn from_qpair(q: &QPair) -> Self {
        Self { b1: q.q1, b2: q.q2 }
    }

    pub fn to_qpair(&self) -> QPair {
        QPair::new(self.b1, self.b2)
    }

    pub fn to_array(&self) -> [f64; 10] {
        self.to_qpair().to_array()
    }

    pub fn norm(&self) -> f64 {
        self.to_qpair().norm()
    }
}

/// Which entropy term enters the bulk energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EntropyKind {
    Original,
    Quasi { nu: f64 },
}

impl Default for EntropyKind {
    fn default() -> Self {
        EntropyKind::Quasi { nu: 5.0 / 9.0 }
    }
}

fn checked_inverses(q: &QPair) -> Result<[Mat3; 3]> {
    let mats = domain_matrices(q);
    let mut inv = [Mat3::zeros(); 3];
    for (k, m) in mats.iter().enumerate() {
        match Cholesky::new(*m) {
            Some(ch) => inv[k] = ch.inverse(),
            None => {
                return Err(Error::OutOfDomain(format!(
                    "quasi-entropy matrix {} has minimum eigenvalue {:.3e}",
                    k + 1,
                    min_eigenvalue(m)
                )))
            }
        }
    }
    Ok(inv)
}

/// Ξ₂ = −ln det(Q1+I/3) − ln det(Q2+I/3) − ln det(I/3−Q1−Q2).
pub fn xi2(q: &QPair) -> Result<f64> {
    checked_inverses(q)?;
    Ok(domain_matrices(q).iter().map(|m| -m.determinant().ln()).sum())
}

/// 𝒮-projected gradient of Ξ₂.
pub fn xi2_grad(q: &QPair) -> Result<QPair> {
    let [i1, i2, i3] = checked_inverses(q)?;
    Ok(QPair::from_mats(&(i3 - i1), &(i3 - i2)))
}

fn logdet_hess_block(inv: &Mat3) -> nalgebra::SMatrix<f64, 5, 5> {
    let e = st_basis();
    let t: [Mat3; 5] = std::array::from_fn(|a| inv * e[a]);
    nalgebra::SMatrix::<f64, 5, 5>::from_fn(|a, b| (t[a] * t[b]).trace())
}

/// Hessian of Ξ₂ in the fixed 10-dim coordinates.
pub fn xi2_hess(q: &QPair) -> Result<Mat10> {
    let [i1, i2, i3] = checked_inverses(q)?;
    let (h1, h2, h3) = (logdet_hess_block(&i1), logdet_hess_block(&i2), logdet_hess_block(&i3));
    let mut h = Mat10::zeros();
    h.fixed_view_mut::<5, 5>(0, 0).copy_from(&(h1 + h3));
    h.fixed_view_mut::<5, 5>(5, 5).copy_from(&(h2 + h3));
    h.fixed_view_mut::<5, 5>(0, 5).copy_from(&h3);
    h.fixed_view_mut::<5, 5>(5, 0).copy_from(&h3);
    Ok(h)
}

/// Mean and covariance of the second-moment features under ρ(B).
pub fn moments_and_covariance(b: &ConjugatePair, rule: &QuadratureRule) -> (Vec10, Mat10) {
    let w = rule.density_weights(Density::Boltzmann(b));
    let mut mean = Vec10::zeros();
    for (f, wk) in rule.features().iter().zip(&w) {
        for i in 0..10 {
            mean[i] += wk * f[i];
        }
    }
    let mut cov = Mat10::zeros();
    for (f, wk) in rule.features().iter().zip(&w) {
        let d: [f64; 10] = std::array::from_fn(|i| f[i] - mean[i]);
        for i in 0..10 {
            let wd = wk * d[i];
            for j in i..10 {
                cov[(i, j)] += wd * d[j];
            }
        }
    }
    for i in 0..10 {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// Q = ⟨(m1²−I/3, m2²−I/3)⟩ under ρ(B).
pub fn moments(b: &ConjugatePair, rule: &QuadratureRule) -> QPair {
    QPair::from_vec(&moments_and_covariance(b, rule).0)
}

/// ln Z with Z = ∫ exp(B1·m1² + B2·m2²) under normalized Haar measure.
pub fn log_partition(b: &ConjugatePair, rule: &QuadratureRule) -> f64 {
    let bv = b.to_array();
    let expo: Vec<f64> = rule.features().iter().map(|f| f.iter().zip(&bv).map(|(x, y)| x * y).sum()).collect();
    let shift = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = expo.iter().zip(&rule.weights).map(|(e, w)| w * (e - shift).exp()).sum();
    shift + z.ln()
}

const RESIDUAL_TOL: f64 = 1e-11;
const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 30;

fn newton_conjugate(target: &Vec10, start: Vec10, rule: &QuadratureRule) -> Option<Vec10> {
    // Minimizes ln Z(B) − B·Q, whose gradient is the moment residual and whose Hessian is the covariance.
    let objective = |b: &Vec10| log_partition(&ConjugatePair::from_qpair(&QPair::from_vec(b)), rule) - b.dot(target);
    let mut b = start;
    let mut f = objective(&b);
    for _ in 0..MAX_NEWTON {
        let (mean, cov) = moments_and_covariance(&ConjugatePair::from_qpair(&QPair::from_vec(&b)), rule);
        let grad = mean - target;
        if grad.norm() < RESIDUAL_TOL {
            return Some(b);
        }
        let step = Cholesky::new(cov)?.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = b - step * t;
            let ft = objective(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * t * (-grad.dot(&step)) + 1e-14 * f.abs().max(1.0) {
                b = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Stalled line search: accept the full step only if it lowers the residual.
            let trial = b - step;
            let (m2, _) = moments_and_covariance(&ConjugatePair::from_qpair(&QPair::from_vec(&trial)), rule);
            if (m2 - target).norm() < grad.norm() {
                b = trial;
                f = objective(&b);
            } else {
                return None;
            }
        }
    }
    let (mean, _) = moments_and_covariance(&ConjugatePair::from_qpair(&QPair::from_vec(&b)), rule);
    ((mean - target).norm() < RESIDUAL_TOL).then_some(b)
}

/// Solves ⟨m_i² − I/3⟩_B = Q_i for the multipliers B.
pub fn solve_conjugate(q: &QPair, rule: &QuadratureRule) -> Result<ConjugatePair> {
    let target = q.to_vec();
    if let Some(b) = newton_conjugate(&target, Vec10::zeros(), rule) {
        return Ok(ConjugatePair::from_qpair(&QPair::from_vec(&b)));
    }
    // Continuation along Q(t) = t·Q.
    let mut b = Vec10::zeros();
    for step in 1..=4 {
        let t = step as f64 / 4.0;
        b = newton_conjugate(&(target * t), b, rule).ok_or_else(|| {
            Error::OutOfDomain(format!(
                "maximum entropy multipliers did not converge (continuation parameter {t})"
            ))
        })?;
    }
    Ok(ConjugatePair::from_qpair(&QPair::from_vec(&b)))
}

/// F_orig = B·Q − ln Z.
pub fn f_orig(q: &QPair, rule: &QuadratureRule) -> Result<f64> {
    let b = solve_conjugate(q, rule)?;
    Ok(b.to_qpair().dot(q) - log_partition(&b, rule))
}

/// Entropy value for either kind.
pub fn entropy_value(q: &QPair, kind: EntropyKind, rule: &QuadratureRule) -> Result<f64> {
    match kind {
        EntropyKind::Original => f_orig(q, rule),
        EntropyKind::Quasi { nu } => Ok(nu * xi2(q)?),
    }
}

/// 𝒮 ∂F_entropy/∂Q.
pub fn entropy_grad(q: &QPair, kind: EntropyKind, rule: &QuadratureRule) -> Result<QPair> {
    match kind {
        EntropyKind::Original => Ok(solve_conjugate(q, rule)?.to_qpair()),
        EntropyKind::Quasi { nu } => Ok(xi2_grad(q)? * nu),
    }
}

/// Second derivative of the entropy term.
pub fn entropy_hess(q: &QPair, kind: EntropyKind, rule: &QuadratureRule) -> Result<Mat10> {
    match kind {
        EntropyKind::Original => {
            let b = solve_conjugate(q, rule)?;
            let (_, cov) = moments_and_covariance(&b, rule);
            let inv = Cholesky::new(cov)
                .ok_or_else(|| Error::OutOfDomain("singular moment covariance".into()))?
                .inverse();
            Ok((inv + inv.transpose()) * 0.5)
        }
        EntropyKind::Quasi { nu } => Ok(xi2_hess(q)? * nu),
    }
}

/// Value, gradient and Hessian of the entropy term in one pass.
pub fn entropy_all(q: &QPair, kind: EntropyKind, rule: &QuadratureRule) -> Result<(f64, Vec10, Mat10)> {
    match kind {
        EntropyKind::Original => {
            let b = solve_conjugate(q, rule)?;
            let (_, cov) = moments_and_covariance(&b, rule);
            let inv = Cholesky::new(cov)
                .ok_or_else(|| Error::OutOfDomain("singular moment covariance".into()))?
                .inverse();
            let val = b.to_qpair().dot(q) - log_partition(&b, rule);
            Ok((val, b.to_qpair().to_vec(), (inv + inv.transpose()) * 0.5))
        }
        EntropyKind::Quasi { nu } => Ok((nu * xi2(q)?, xi2_grad(q)?.to_vec() * nu, xi2_hess(q)? * nu)),
    }
}
