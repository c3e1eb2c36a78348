//! Symmetric traceless tensors, frames, monomials and rotational derivatives.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec10 = SVector<f64, 10>;
pub type Mat10 = SMatrix<f64, 10, 10>;
pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat9 = SMatrix<f64, 9, 9>;

const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(6)
const R6: f64 = 0.408_248_290_463_863_f64;

/// Orthonormal basis of symmetric traceless 3x3 matrices: the identity-frame
/// `s1..s5` rescaled to unit Frobenius norm.
pub fn st_basis() -> [Mat3; 5] {
    [
        Mat3::new(2.0 * R6, 0.0, 0.0, 0.0, -R6, 0.0, 0.0, 0.0, -R6),
        Mat3::new(0.0, 0.0, 0.0, 0.0, R2, 0.0, 0.0, 0.0, -R2),
        Mat3::new(0.0, R2, 0.0, R2, 0.0, 0.0, 0.0, 0.0, 0.0),
        Mat3::new(0.0, 0.0, R2, 0.0, 0.0, 0.0, R2, 0.0, 0.0),
        Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, R2, 0.0, R2, 0.0),
    ]
}

/// The 9x5 matrix whose columns are the row-major vectorized basis tensors.
pub fn st_embedding() -> SMatrix<f64, 9, 5> {
    let mut p = SMatrix::<f64, 9, 5>::zeros();
    for (a, e) in st_basis().iter().enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                p[(3 * i + j, a)] = e[(i, j)];
            }
        }
    }
    p
}

/// Row-major vectorization of a 3x3 matrix.
pub fn vec9(m: &Mat3) -> SVector<f64, 9> {
    SVector::<f64, 9>::from_fn(|r, _| m[(r / 3, r % 3)])
}

pub fn unvec9(v: &SVector<f64, 9>) -> Mat3 {
    Mat3::from_fn(|i, j| v[3 * i + j])
}

/// The projection 𝒮: symmetric part minus trace.
pub fn sym_traceless(m: &Mat3) -> Mat3 {
    let s = (m + m.transpose()) * 0.5;
    s - Mat3::identity() * (m.trace() / 3.0)
}

/// Frobenius dot product.
pub fn ddot(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

/// A symmetric traceless 3x3 tensor stored by its five orthonormal coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SymTraceless2 {
    pub coords: [f64; 5],
}

impl SymTraceless2 {
    pub const ZERO: Self = Self { coords: [0.0; 5] };

    pub fn new(coords: [f64; 5]) -> Self {
        Self { coords }
    }

    /// Coordinates of 𝒮m. Exact for matrices already symmetric traceless.
    pub fn from_mat(m: &Mat3) -> Self {
        Self {
            coords: [
                (2.0 * m[(0, 0)] - m[(1, 1)] - m[(2, 2)]) * R6,
                (m[(1, 1)] - m[(2, 2)]) * R2,
                (m[(0, 1)] + m[(1, 0)]) * R2,
                (m[(0, 2)] + m[(2, 0)]) * R2,
                (m[(1, 2)] + m[(2, 1)]) * R2,
            ],
        }
    }

    pub fn to_mat(&self) -> Mat3 {
        let c = &self.coords;
        let d0 = c[0] * R6;
        let d1 = c[1] * R2;
        Mat3::new(
            2.0 * d0,
            c[2] * R2,
            c[3] * R2,
            c[2] * R2,
            -d0 + d1,
            c[4] * R2,
            c[3] * R2,
            c[4] * R2,
            -d0 - d1,
        )
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// R M Rᵀ.
    pub fn rotate(&self, r: &Mat3) -> Self {
        Self::from_mat(&(r * self.to_mat() * r.transpose()))
    }
}

impl Add for SymTraceless2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { coords: std::array::from_fn(|i| self.coords[i] + o.coords[i]) }
    }
}

impl Sub for SymTraceless2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { coords: std::array::from_fn(|i| self.coords[i] - o.coords[i]) }
    }
}

impl Neg for SymTraceless2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self { coords: self.coords.map(|c| -c) }
    }
}

impl Mul<f64> for SymTraceless2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self { coords: self.coords.map(|c| c * s) }
    }
}

/// The order parameter pair (Q1, Q2), an element of the 10-dim space 𝕏.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct QPair {
    pub q1: SymTraceless2,
    pub q2: SymTraceless2,
}

impl QPair {
    pub const ZERO: Self = Self { q1: SymTraceless2::ZERO, q2: SymTraceless2::ZERO };

    pub fn new(q1: SymTraceless2, q2: SymTraceless2) -> Self {
        Self { q1, q2 }
    }

    pub fn from_mats(m1: &Mat3, m2: &Mat3) -> Self {
        Self { q1: SymTraceless2::from_mat(m1), q2: SymTraceless2::from_mat(m2) }
    }

    pub fn mats(&self) -> (Mat3, Mat3) {
        (self.q1.to_mat(), self.q2.to_mat())
    }

    pub fn to_array(&self) -> [f64; 10] {
        let mut a = [0.0; 10];
        a[..5].copy_from_slice(&self.q1.coords);
        a[5..].copy_from_slice(&self.q2.coords);
        a
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            q1: SymTraceless2::new([a[0], a[1], a[2], a[3], a[4]]),
            q2: SymTraceless2::new([a[5], a[6], a[7], a[8], a[9]]),
        }
    }

    pub fn to_vec(&self) -> Vec10 {
        Vec10::from_column_slice(&self.to_array())
    }

    pub fn from_vec(v: &Vec10) -> Self {
        Self::from_array(v.as_slice())
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.q1.dot(&o.q1) + self.q2.dot(&o.q2)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn rotate(&self, r: &Mat3) -> Self {
        Self { q1: self.q1.rotate(r), q2: self.q2.rotate(r) }
    }

    /// Whether Q1 and Q2 commute, to tolerance relative to their sizes.
    pub fn commutator_norm(&self) -> f64 {
        let (a, b) = self.mats();
        (a * b - b * a).norm()
    }
}

impl Add for QPair {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { q1: self.q1 + o.q1, q2: self.q2 + o.q2 }
    }
}

impl AddAssign for QPair {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for QPair {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { q1: self.q1 - o.q1, q2: self.q2 - o.q2 }
    }
}

impl Neg for QPair {
    type Output = Self;
    fn neg(self) -> Self {
        Self { q1: -self.q1, q2: -self.q2 }
    }
}

impl Mul<f64> for QPair {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self { q1: self.q1 * s, q2: self.q2 * s }
    }
}

fn mat_rows(m: &Mat3) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn mat_from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| r[i][j])
}

impl Serialize for QPair {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (a, b) = self.mats();
        [mat_rows(&a), mat_rows(&b)].serialize(s)
    }
}

impl<'de> Deserialize<'de> for QPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[[[f64; 3]; 3]; 2]>::deserialize(d)?;
        Ok(Self::from_mats(&mat_from_rows(&a), &mat_from_rows(&b)))
    }
}

/// An orthonormal right-handed frame; the columns of `m` are n1, n2, n3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    m: Mat3,
}

impl Default for Frame {
    fn default() -> Self {
        Self::identity()
    }
}

impl Frame {
    pub fn identity() -> Self {
        Self { m: Mat3::identity() }
    }

    /// Accepts a rotation matrix (columns n1, n2, n3).
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let err = (m.transpose() * m - Mat3::identity()).amax();
        if err > 1e-10 || (m.determinant() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "not a rotation matrix (orthogonality error {err:.3e}, det {:.12})",
                m.determinant()
            )));
        }
        Ok(Self { m })
    }

    /// Re-orthonormalizes a nearly orthogonal matrix (polar factor).
    pub fn from_matrix_lossy(m: Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self { m: r }
    }

    /// Rotation by angle |w| about axis w (Rodrigues).
    pub fn from_rotation_vector(w: &Vec3) -> Self {
        Self { m: rotation_matrix(w) }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn n(&self, i: usize) -> Vec3 {
        self.m.column(i).into_owned()
    }

    /// Left-multiplies by a rotation given in world coordinates.
    pub fn rotated(&self, r: &Mat3) -> Self {
        Self { m: r * self.m }
    }

    /// Rotation about the frame's own axis n_k by `angle`.
    pub fn rotated_about_axis(&self, k: usize, angle: f64) -> Self {
        self.rotated(&rotation_matrix(&(self.n(k) * angle)))
    }
}

impl Serialize for Frame {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        mat_rows(&self.m).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Frame {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Frame::from_matrix(mat_from_rows(&rows)).map_err(serde::de::Error::custom)
    }
}

pub fn rotation_matrix(w: &Vec3) -> Mat3 {
    let th = w.norm();
    let k = if th > 0.0 { w / th } else { Vec3::zeros() };
    let kx = Mat3::new(0.0, -k[2], k[1], k[2], 0.0, -k[0], -k[1], k[0], 0.0);
    Mat3::identity() + kx * th.sin() + kx * kx * (1.0 - th.cos())
}

/// The 5x5 orthogonal matrix of M ↦ R M Rᵀ in the fixed coordinates.
pub fn st_rotation(r: &Mat3) -> Mat5 {
    let e = st_basis();
    let mut d = Mat5::zeros();
    for b in 0..5 {
        let c = SymTraceless2::from_mat(&(r * e[b] * r.transpose()));
        for a in 0..5 {
            d[(a, b)] = c.coords[a];
        }
    }
    d
}

/// The 9x9 matrix of M ↦ R M Rᵀ on row-major vectorized matrices.
pub fn mat_rotation(r: &Mat3) -> Mat9 {
    Mat9::from_fn(|row, col| {
        let (i, j) = (row / 3, row % 3);
        let (k, l) = (col / 3, col % 3);
        r[(i, k)] * r[(j, l)]
    })
}

/// A fully symmetric tensor of order ≤ 4 over ℝ³, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor {
    order: usize,
    data: Vec<f64>,
}

impl SymTensor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order);
        self.data[idx.iter().fold(0, |acc, &i| 3 * acc + i)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Order-2 tensor as a 3x3 matrix.
    pub fn as_mat3(&self) -> Option<Mat3> {
        (self.order == 2).then(|| Mat3::from_fn(|i, j| self.data[3 * i + j]))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Symmetrized product n1^k1 n2^k2 n3^k3.
pub fn monomial(frame: &Frame, powers: (usize, usize, usize)) -> Result<SymTensor> {
    let (k1, k2, k3) = powers;
    let order = k1 + k2 + k3;
    if order > 4 {
        return Err(Error::InvalidArgument(format!("monomial order {order} exceeds 4")));
    }
    let mut factors = Vec::with_capacity(order);
    for (k, a) in [(k1, 0), (k2, 1), (k3, 2)] {
        factors.extend(std::iter::repeat(frame.n(a)).take(k));
    }
    let perms = permutations(order);
    let len = 3usize.pow(order as u32);
    let mut data = vec![0.0; len];
    let mut idx = vec![0usize; order];
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut r = flat;
        for t in (0..order).rev() {
            idx[t] = r % 3;
            r /= 3;
        }
        let sum: f64 = perms
            .iter()
            .map(|p| (0..order).map(|t| factors[p[t]][idx[t]]).product::<f64>())
            .sum();
        *slot = sum / perms.len() as f64;
    }
    Ok(SymTensor { order, data })
}

/// Symmetric product a b = (a⊗b + b⊗a)/2.
pub fn sym_product(a: &Vec3, b: &Vec3) -> Mat3 {
    (a * b.transpose() + b * a.transpose()) * 0.5
}

/// The local basis generated by a frame.
#[derive(Clone, Copy, Debug)]
pub struct LocalBasis {
    pub s: [Mat3; 5],
    pub a: [Mat3; 3],
}

pub fn local_basis(frame: &Frame) -> LocalBasis {
    let (n1, n2, n3) = (frame.n(0), frame.n(1), frame.n(2));
    let outer = |u: &Vec3, v: &Vec3| u * v.transpose();
    LocalBasis {
        s: [
            outer(&n1, &n1) - Mat3::identity() / 3.0,
            outer(&n2, &n2) - outer(&n3, &n3),
            sym_product(&n1, &n2),
            sym_product(&n1, &n3),
            sym_product(&n2, &n3),
        ],
        a: [
            outer(&n1, &n2) - outer(&n2, &n1),
            outer(&n3, &n1) - outer(&n1, &n3),
            outer(&n2, &n3) - outer(&n3, &n2),
        ],
    }
}

/// A linear map on 3x3 matrices, stored as 9x9 on row-major vectorizations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tensor4Op(pub Mat9);

impl Default for Tensor4Op {
    fn default() -> Self {
        Self(Mat9::zeros())
    }
}

impl Tensor4Op {
    pub fn zeros() -> Self {
        Self(Mat9::zeros())
    }

    pub fn identity() -> Self {
        Self(Mat9::identity())
    }

    pub fn apply(&self, m: &Mat3) -> Mat3 {
        unvec9(&(self.0 * vec9(m)))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Restriction to symmetric traceless inputs and outputs, in the fixed coordinates.
    pub fn st_block(&self) -> Mat5 {
        let p = st_embedding();
        p.transpose() * self.0 * p
    }

    /// Matrix from symmetric traceless coordinates out, general 3x3 in.
    pub fn st_rows(&self) -> SMatrix<f64, 5, 9> {
        st_embedding().transpose() * self.0
    }

    /// Conjugation by a rotation: X ↦ R T(Rᵀ X R) Rᵀ.
    pub fn rotate(&self, r: &Mat3) -> Self {
        let k = mat_rotation(r);
        Self(k * self.0 * k.transpose())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

impl Add for Tensor4Op {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self(self.0 + o.0)
    }
}

impl Sub for Tensor4Op {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self(self.0 - o.0)
    }
}

/// A QPair-valued function of a frame.
pub trait FrameMap {
    fn eval(&self, frame: &Frame) -> QPair;

    /// Directional derivative when each n_i moves by `dn[i]`, if known in closed form.
    fn directional(&self, _frame: &Frame, _dn: &[Vec3; 3]) -> Option<QPair> {
        None
    }
}

impl<F: Fn(&Frame) -> QPair> FrameMap for F {
    fn eval(&self, frame: &Frame) -> QPair {
        self(frame)
    }
}

/// Q_i = s_i (n1² − I/3) + b_i (n2² − n3²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiaxialMap {
    pub s1: f64,
    pub b1: f64,
    pub s2: f64,
    pub b2: f64,
}

impl FrameMap for BiaxialMap {
    fn eval(&self, frame: &Frame) -> QPair {
        let lb = local_basis(frame);
        QPair::from_mats(&(lb.s[0] * self.s1 + lb.s[1] * self.b1), &(lb.s[0] * self.s2 + lb.s[1] * self.b2))
    }

    fn directional(&self, frame: &Frame, dn: &[Vec3; 3]) -> Option<QPair> {
        let d = |a: usize| {
            let n = frame.n(a);
            dn[a] * n.transpose() + n * dn[a].transpose()
        };
        let (d1, d2, d3) = (d(0), d(1), d(2));
        Some(QPair::from_mats(
            &(d1 * self.s1 + (d2 - d3) * self.b1),
            &(d1 * self.s2 + (d2 - d3) * self.b2),
        ))
    }
}

/// Variation of the frame vectors under the infinitesimal rotation about n_k: ℒ_k n_i = ε^{ijk} n_j.
pub fn frame_variation(frame: &Frame, k: usize) -> [Vec3; 3] {
    std::array::from_fn(|i| {
        let mut v = Vec3::zeros();
        for j in 0..3 {
            let e = levi_civita(i, j, k);
            if e != 0.0 {
                v += frame.n(j) * e;
            }
        }
        v
    })
}

pub fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// ℒ_k f at `frame`, with k in 1..=3.
pub fn lie_derivative<F: FrameMap + ?Sized>(k: usize, f: &F, frame: &Frame) -> Result<QPair> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidArgument(format!("axis index {k} not in 1..=3")));
    }
    if let Some(d) = f.directional(frame, &frame_variation(frame, k - 1)) {
        return Ok(d);
    }
    Ok(lie_derivative_fd(k, f, frame, 1e-5))
}

/// Central difference of f along the rotation about n_k.
pub fn lie_derivative_fd<F: FrameMap + ?Sized>(k: usize, f: &F, frame: &Frame, h: f64) -> QPair {
    let plus = f.eval(&frame.rotated_about_axis(k - 1, h));
    let minus = f.eval(&frame.rotated_about_axis(k - 1, -h));
    (plus - minus) * (0.5 / h)
}

/// The three matrices whose positivity defines the admissible set.
pub fn domain_matrices(q: &QPair) -> [Mat3; 3] {
    let (a, b) = q.mats();
    let third = Mat3::identity() / 3.0;
    [a + third, b + third, third - a - b]
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    m.symmetric_eigenvalues().min()
}

/// Smallest eigenvalue over the three defining matrices.
pub fn domain_margin(q: &QPair) -> f64 {
    domain_matrices(q).iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min)
}

pub fn domain_membership(q: &QPair, delta: f64) -> bool {
    domain_margin(q) >= delta
}

/// Whether every defining matrix minus δ·I is positive definite; cheaper than [`domain_margin`].
pub fn strictly_inside(q: &QPair, delta: f64) -> bool {
    domain_matrices(q).iter().all(|m| nalgebra::Cholesky::new(m - Mat3::identity() * delta).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn frame_from(w: [f64; 3]) -> Frame {
        Frame::from_rotation_vector(&Vec3::new(w[0], w[1], w[2]))
    }

    #[test]
    fn projection_examples() {
        assert!(sym_traceless(&Mat3::identity()).norm() < 1e-15);
        let e12 = Mat3::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let p = sym_traceless(&e12);
        assert_eq!(p[(0, 1)], 0.5);
        assert_eq!(p[(1, 0)], 0.5);
        let d = sym_traceless(&Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)));
        assert_relative_eq!(d, Mat3::from_diagonal(&Vec3::new(2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0)), epsilon = 1e-15);
    }

    #[test]
    fn basis_is_orthonormal() {
        let e = st_basis();
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert_relative_eq!(ddot(&e[a], &e[b]), want, epsilon = 1e-15);
            }
            assert_relative_eq!(e[a].trace(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn monomial_examples() {
        let id = Frame::identity();
        let m12 = monomial(&id, (1, 1, 0)).unwrap().as_mat3().unwrap();
        assert_eq!(m12, Mat3::new(0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0));
        let m122 = monomial(&id, (1, 2, 0)).unwrap();
        for idx in [[0, 1, 1], [1, 0, 1], [1, 1, 0]] {
            assert_relative_eq!(m122.get(&idx), 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(m122.get(&[0, 0, 1]), 0.0);
        let m123 = monomial(&id, (1, 1, 1)).unwrap();
        assert_relative_eq!(m123.get(&[2, 0, 1]), 1.0 / 6.0, epsilon = 1e-15);
        assert!(monomial(&id, (3, 1, 1)).is_err());
    }

    #[test]
    fn local_basis_identity_frame() {
        let lb = local_basis(&Frame::identity());
        assert_relative_eq!(lb.s[0], Mat3::from_diagonal(&Vec3::new(2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0)), epsilon = 1e-15);
        assert_eq!(lb.s[4][(1, 2)], 0.5);
        assert_eq!(lb.s[4][(2, 1)], 0.5);
        let norms: Vec<f64> = lb.s.iter().map(|s| ddot(s, s)).collect();
        assert_relative_eq!(norms[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(norms[1], 2.0, epsilon = 1e-15);
        assert_relative_eq!(norms[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn lie_derivative_of_biaxial_form() {
        let f = BiaxialMap { s1: 0.6, b1: 0.05, s2: -0.2, b2: 0.3 };
        let fr = frame_from([0.3, -1.1, 0.7]);
        let lb = local_basis(&fr);
        let xi1 = lie_derivative(1, &f, &fr).unwrap();
        let want1 = QPair::from_mats(&(lb.s[4] * (4.0 * f.b1)), &(lb.s[4] * (4.0 * f.b2)));
        assert!((xi1 - want1).norm() < 1e-14);
        let xi2 = lie_derivative(2, &f, &fr).unwrap();
        let want2 = QPair::from_mats(&(lb.s[3] * (-2.0 * (f.s1 + f.b1))), &(lb.s[3] * (-2.0 * (f.s2 + f.b2))));
        assert!((xi2 - want2).norm() < 1e-14);
        for k in 1..=3 {
            let exact = lie_derivative(k, &f, &fr).unwrap();
            let fd = lie_derivative_fd(k, &f, &fr, 1e-5);
            assert!((exact - fd).norm() < 1e-9, "axis {k}");
        }
    }

    #[test]
    fn lie_derivative_fd_is_second_order() {
        let f = BiaxialMap { s1: 0.4, b1: -0.1, s2: 0.1, b2: 0.2 };
        let closure = |fr: &Frame| f.eval(fr);
        let fr = frame_from([1.0, 0.2, -0.4]);
        for k in 1..=3 {
            let exact = lie_derivative(k, &f, &fr).unwrap();
            let e3 = (lie_derivative_fd(k, &closure, &fr, 1e-3) - exact).norm();
            let e4 = (lie_derivative_fd(k, &closure, &fr, 1e-4) - exact).norm();
            let ratio = e3 / e4;
            assert!(ratio > 80.0 && ratio < 120.0, "axis {k}: ratio {ratio}");
        }
    }

    #[test]
    fn constant_map_has_zero_derivative() {
        let c = QPair::from_array(&[0.1, 0.2, 0.0, 0.0, 0.1, 0.0, 0.0, 0.3, 0.0, 0.0]);
        let f = move |_: &Frame| c;
        let d = lie_derivative(2, &f, &frame_from([0.1, 0.2, 0.3])).unwrap();
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn domain_examples() {
        assert!(domain_membership(&QPair::ZERO, 0.1));
        let q1 = Mat3::from_diagonal(&Vec3::new(2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0)) * (1.0 - 1e-9);
        let q = QPair::from_mats(&q1, &Mat3::zeros());
        assert!(!domain_membership(&q, 0.1));
    }

    #[test]
    fn serde_round_trip() {
        let q = QPair::from_array(&[0.1, -0.2, 0.03, 0.0, 0.5, 0.2, 0.0, -0.1, 0.3, 0.04]);
        let text = serde_json::to_string(&q).unwrap();
        assert!(text.starts_with("[[["));
        let back: QPair = serde_json::from_str(&text).unwrap();
        assert!((back - q).norm() < 1e-15);
        let fr = frame_from([0.4, 0.5, 0.6]);
        let back: Frame = serde_json::from_str(&serde_json::to_string(&fr).unwrap()).unwrap();
        assert!((back.matrix() - fr.matrix()).amax() < 1e-15);
        assert!(serde_json::from_str::<Frame>("[[1,0,0],[0,1,0],[0,0,2]]").is_err());
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_self_adjoint(a in prop::array::uniform9(-2.0f64..2.0), b in prop::array::uniform9(-2.0f64..2.0)) {
            let ma = Mat3::from_row_slice(&a);
            let mb = Mat3::from_row_slice(&b);
            let pa = sym_traceless(&ma);
            prop_assert!((sym_traceless(&pa) - pa).amax() < 1e-15);
            prop_assert!((ddot(&pa, &mb) - ddot(&ma, &sym_traceless(&mb))).abs() < 1e-12);
            let c = SymTraceless2::from_mat(&ma);
            prop_assert!((c.to_mat() - pa).amax() < 1e-14);
        }

        #[test]
        fn squares_of_frame_sum_to_identity(w in prop::array::uniform3(-3.0f64..3.0)) {
            let fr = frame_from(w);
            let sum = (0..3)
                .map(|a| {
                    let p = match a { 0 => (2, 0, 0), 1 => (0, 2, 0), _ => (0, 0, 2) };
                    monomial(&fr, p).unwrap().as_mat3().unwrap()
                })
                .fold(Mat3::zeros(), |acc, m| acc + m);
            prop_assert!((sum - Mat3::identity()).amax() < 1e-14);
        }

        #[test]
        fn frames_are_rotations(w in prop::array::uniform3(-3.0f64..3.0)) {
            let m = *frame_from(w).matrix();
            prop_assert!((m.transpose() * m - Mat3::identity()).amax() < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn st_rotation_matches_conjugation(w in prop::array::uniform3(-3.0f64..3.0), c in prop::array::uniform5(-1.0f64..1.0)) {
            let r = *frame_from(w).matrix();
            let x = SymTraceless2::new(c);
            let d = st_rotation(&r);
            let y = d * nalgebra::SVector::<f64, 5>::from_column_slice(&c);
            let z = x.rotate(&r);
            for a in 0..5 {
                prop_assert!((y[a] - z.coords[a]).abs() < 1e-13);
            }
            prop_assert!((d.transpose() * d - Mat5::identity()).amax() < 1e-13);
        }

        #[test]
        fn domain_zero_matches_psd(c in prop::array::uniform10(-0.5f64..0.5)) {
            let q = QPair::from_array(&c);
            let psd = domain_matrices(&q).iter().all(|m| m.symmetric_eigenvalues().min() >= 0.0);
            prop_assert_eq!(domain_membership(&q, 0.0), psd);
        }
    }
}
