//! Product quadrature over SO(3) with normalized Haar measure.

use std::f64::consts::PI;

use crate::entropy::ConjugatePair;
use crate::tensor::{Frame, Mat3, SymTraceless2, Vec3};
use crate::{Error, Result};

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Second-moment features φ(q) = (coords(m1²−I/3), coords(m2²−I/3)).
pub fn second_moment_features(frame: &Frame) -> [f64; 10] {
    let m = frame.matrix();
    let mut out = [0.0; 10];
    for a in 0..2 {
        let n: Vec3 = m.column(a).into_owned();
        let c = SymTraceless2::from_mat(&(n * n.transpose()));
        out[5 * a..5 * a + 5].copy_from_slice(&c.coords);
    }
    out
}

/// Nodes and positive weights approximating the normalized Haar integral.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<Frame>,
    pub weights: Vec<f64>,
    features: Vec<[f64; 10]>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached second-moment features of every node.
    pub fn features(&self) -> &[[f64; 10]] {
        &self.features
    }

    /// Normalized weights w_k ρ(q_k) / Σ for the given density.
    pub fn density_weights(&self, density: Density) -> Vec<f64> {
        match density {
            Density::Uniform => self.weights.clone(),
            Density::Boltzmann(b) => {
                let bv = b.to_array();
                let expo: Vec<f64> =
                    self.features.iter().map(|f| f.iter().zip(&bv).map(|(x, y)| x * y).sum()).collect();
                let shift = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut w: Vec<f64> =
                    expo.iter().zip(&self.weights).map(|(e, w)| w * (e - shift).exp()).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                w
            }
        }
    }

    /// Weighted average of an arbitrary vector-valued integrand.
    pub fn average<const N: usize>(&self, density: Density, f: impl Fn(&Frame) -> [f64; N]) -> [f64; N] {
        let w = self.density_weights(density);
        let mut acc = [0.0; N];
        for (node, wk) in self.nodes.iter().zip(&w) {
            let v = f(node);
            for i in 0..N {
                acc[i] += wk * v[i];
            }
        }
        acc
    }

    /// Weighted average of a matrix-valued integrand.
    pub fn average_mat(&self, density: Density, f: impl Fn(&Frame) -> Mat3) -> Mat3 {
        let a = self.average::<9>(density, |q| {
            let m = f(q);
            std::array::from_fn(|r| m[(r / 3, r % 3)])
        });
        Mat3::from_fn(|i, j| a[3 * i + j])
    }
}

/// The orientational density used for averaging.
#[derive(Clone, Copy, Debug)]
pub enum Density<'a> {
    Uniform,
    Boltzmann(&'a ConjugatePair),
}

/// ZYZ Euler product rule: Gauss–Legendre in cos β, uniform in α and γ.
pub fn build_rule(n_beta: usize, n_torus: usize) -> Result<QuadratureRule> {
    if n_beta < 2 || n_torus < 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature sizes must be at least 2 (got n_beta={n_beta}, n_torus={n_torus})"
        )));
    }
    let (x, w) = gauss_legendre(n_beta);
    let mut nodes = Vec::with_capacity(n_beta * n_torus * n_torus);
    let mut weights = Vec::with_capacity(nodes.capacity());
    let wt = 1.0 / (n_torus * n_torus) as f64;
    for (xb, wb) in x.iter().zip(&w) {
        let rb = rot_y(xb.acos());
        for ia in 0..n_torus {
            let ra = rot_z(2.0 * PI * ia as f64 / n_torus as f64);
            let rab = ra * rb;
            for ig in 0..n_torus {
                let m = rab * rot_z(2.0 * PI * ig as f64 / n_torus as f64);
                nodes.push(Frame::from_matrix_lossy(m));
                weights.push(0.5 * wb * wt);
            }
        }
    }
    let features = nodes.iter().map(second_moment_features).collect();
    Ok(QuadratureRule { nodes, weights, features })
}

/// The default rule (24 × 24 × 24).
pub fn default_rule() -> &'static QuadratureRule {
    static RULE: std::sync::OnceLock<QuadratureRule> = std::sync::OnceLock::new();
    RULE.get_or_init(|| build_rule(24, 24).expect("valid sizes"))
}

/// A Haar-distributed random rotation (uniform unit quaternion).
pub fn haar_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos(), b * (2.0 * PI * u3).sin(), b * (2.0 * PI * u3).cos());
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rotation_matrix, QPair, Vec10};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        for p in 0..12 {
            let num: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let exact = if p % 2 == 0 { 2.0 / (p as f64 + 1.0) } else { 0.0 };
            assert_relative_eq!(num, exact, epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(build_rule(1, 8).is_err());
        assert!(build_rule(8, 1).is_err());
    }

    #[test]
    fn constant_and_second_moment() {
        let rule = build_rule(8, 8).unwrap();
        let total: f64 = rule.weights.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-13);
        assert!(rule.weights.iter().all(|&w| w > 0.0));
        let m11 = rule.average_mat(Density::Uniform, |q| q.n(0) * q.n(0).transpose());
        assert_relative_eq!(m11, Mat3::identity() / 3.0, epsilon = 1e-14);
        let m2 = rule.average_mat(Density::Uniform, |q| q.n(1) * q.n(1).transpose() - Mat3::identity() / 3.0);
        assert!(m2.amax() < 1e-14);
    }

    #[test]
    fn fourth_moment_matches_monte_carlo() {
        let rule = build_rule(12, 12).unwrap();
        let [quad] = rule.average::<1>(Density::Uniform, |q| [(q.n(0)[0] * q.n(1)[1]).powi(2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let r = haar_rotation(&mut rng);
            let v = (r[(0, 0)] * r[(1, 1)]).powi(2);
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let sd = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        // Exact value 2/15 for the uniform measure.
        assert_relative_eq!(quad, 2.0 / 15.0, epsilon = 1e-13);
        assert!((quad - mean).abs() < 5.0 * sd, "quad {quad} mc {mean} sd {sd}");
    }

    #[test]
    fn boltzmann_average_is_uniaxial() {
        let rule = build_rule(32, 32).unwrap();
        let b1 = SymTraceless2::from_mat(&(Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)) * 5.0));
        let bp = ConjugatePair { b1, b2: SymTraceless2::ZERO };
        let avg = rule.average_mat(Density::Boltzmann(&bp), |q| q.n(0) * q.n(0).transpose() - Mat3::identity() / 3.0);
        assert!(avg[(0, 0)] > 0.0);
        assert_relative_eq!(avg[(1, 1)], avg[(2, 2)], epsilon = 1e-10);
        assert!(avg[(0, 1)].abs() < 1e-10);
        let [one] = rule.average::<1>(Density::Boltzmann(&bp), |_| [2.5]);
        assert_relative_eq!(one, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn boltzmann_matches_monte_carlo() {
        let rule = build_rule(16, 16).unwrap();
        let b1 = SymTraceless2::from_mat(&(Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)) * 5.0));
        let bp = ConjugatePair { b1, b2: SymTraceless2::ZERO };
        let [quad] = rule.average::<1>(Density::Boltzmann(&bp), |q| [q.n(0)[0].powi(2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..400_000 {
            let r = haar_rotation(&mut rng);
            let x = r[(0, 0)];
            let w = (5.0 * x * x).exp();
            num += w * x * x;
            den += w;
        }
        assert!((quad - num / den).abs() < 5e-3);
    }

    #[test]
    fn equivariance_under_rotation() {
        let rule = default_rule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bp = ConjugatePair::from_qpair(&QPair::from_array(&[1.0, -0.5, 0.3, 0.2, 0.1, -0.4, 0.7, 0.0, 0.2, 0.3]));
        let f = |q: &Frame| q.n(0) * q.n(0).transpose() * 2.0 + q.n(1) * q.n(2).transpose();
        let base = rule.average_mat(Density::Boltzmann(&bp), f);
        for _ in 0..3 {
            let r = haar_rotation(&mut rng);
            let rb = ConjugatePair { b1: bp.b1.rotate(&r), b2: bp.b2.rotate(&r) };
            let rot = rule.average_mat(Density::Boltzmann(&rb), f);
            assert!((rot - r * base * r.transpose()).amax() < 1e-10);
        }
        let _ = rotation_matrix(&Vec3::zeros());
    }

    #[test]
    fn refinement_converges() {
        let raw = Vec10::from([4.0, -2.0, 3.0, 1.0, -2.0, 1.0, 3.0, 2.0, -1.0, 2.0]);
        let bp = ConjugatePair::from_qpair(&QPair::from_vec(&(raw * (10.0 / raw.norm()))));
        let f = |q: &Frame| {
            let (a, b) = (q.n(0), q.n(1));
            [a[0].powi(4), a[0] * a[1] * b[2] * b[0], b[1].powi(2) * a[2].powi(2), a[2] * b[2]]
        };
        let diff = |n: usize| {
            let coarse = build_rule(n, n).unwrap().average::<4>(Density::Boltzmann(&bp), f);
            let fine = build_rule(2 * n, 2 * n).unwrap().average::<4>(Density::Boltzmann(&bp), f);
            (0..4).map(|i| (coarse[i] - fine[i]).abs()).fold(0.0, f64::max)
        };
        let d16 = diff(16);
        let d40 = diff(40);
        eprintln!("refinement change at |B|=10: n=16 {d16:.3e}, n=40 {d40:.3e}");
        assert!(d40 < 1e-8, "n=40 change {d40:.3e}");
    }
}
