//! Fourth-order closure tensors and the kinetic operators built from them.
//!
//! Both routes produce a [`MomentState`]: averages of frame monomials under
//! some orientational moment functional. The maximum entropy route uses the
//! Boltzmann density matching Q; the quasi-entropy route minimizes Ξ₄ over all
//! moment functionals consistent with Q, represented as polynomial densities
//! in the space of sign-flip invariant polynomials of degree ≤ 4 in the frame.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::entropy::{solve_conjugate, ConjugatePair};
use crate::so3::{build_rule, default_rule, second_moment_features, Density, QuadratureRule};
use crate::tensor::{
    st_embedding, sym_product, Frame, Mat10, Mat3, Mat5, QPair, SymTraceless2, Tensor4Op, Vec3,
};
use crate::{Error, Result};

type Mat11 = SMatrix<f64, 11, 11>;
type Mat8 = SMatrix<f64, 8, 8>;
type Mat5x9 = SMatrix<f64, 5, 9>;

/// Kinetic and inertial coefficients. Γ_i absorb the rotational diffusion prefactor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub zeta: f64,
    pub i11: f64,
    pub i22: f64,
    pub i33: f64,
    pub eta: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self { gamma1: 1.0, gamma2: 1.0, gamma3: 1.0, zeta: 1.0, i11: 1.0, i22: 1.0, i33: 1.0, eta: 1.0 }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("zeta", self.zeta),
            ("i11", self.i11),
            ("i22", self.i22),
            ("i33", self.i33),
            ("eta", self.eta),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("params.{name} must be positive (got {v})")));
            }
        }
        Ok(())
    }

    /// e1 = I22 / (I11 + I22).
    pub fn e1(&self) -> f64 {
        self.i22 / (self.i11 + self.i22)
    }

    pub fn e2(&self) -> f64 {
        1.0 - self.e1()
    }
}

/// Per-frame monomials entering the moment state.
struct NodeFeatures {
    m: [Vec3; 3],
    even: [f64; 11],
    odd: [[f64; 8]; 3],
    /// Coordinates of m1²−I/3, m2²−I/3, m1m2, m1m3, m2m3.
    st: [[f64; 5]; 5],
    /// Row-major vectorizations of m1⊗m3, m1⊗m2, m2⊗m1, m2⊗m3.
    dyads: [[f64; 9]; 4],
}

fn coords(m: &Mat3) -> [f64; 5] {
    SymTraceless2::from_mat(m).coords
}

impl NodeFeatures {
    fn new(frame: &Frame) -> Self {
        let m = [frame.n(0), frame.n(1), frame.n(2)];
        let third = Mat3::identity() / 3.0;
        let sq = |v: &Vec3| v * v.transpose();
        let s1 = coords(&(sq(&m[0]) - third));
        let s2 = coords(&(sq(&m[1]) - third));
        let d23 = coords(&(sq(&m[1]) - sq(&m[2])));
        let p12 = coords(&sym_product(&m[0], &m[1]));
        let p13 = coords(&sym_product(&m[0], &m[2]));
        let p23 = coords(&sym_product(&m[1], &m[2]));
        let mut even = [0.0; 11];
        even[0] = 1.0;
        even[1..6].copy_from_slice(&s1);
        even[6..11].copy_from_slice(&d23);
        let odd_block = |v: &Vec3, p: &[f64; 5]| {
            let mut o = [0.0; 8];
            o[..3].copy_from_slice(v.as_slice());
            o[3..].copy_from_slice(p);
            o
        };
        let odd = [odd_block(&m[0], &p23), odd_block(&m[1], &p13), odd_block(&m[2], &p12)];
        let dyad = |a: &Vec3, b: &Vec3| -> [f64; 9] { std::array::from_fn(|r| a[r / 3] * b[r % 3]) };
        let dyads = [dyad(&m[0], &m[2]), dyad(&m[0], &m[1]), dyad(&m[1], &m[0]), dyad(&m[1], &m[2])];
        Self { m, even, odd, st: [s1, s2, p12, p13, p23], dyads }
    }
}

/// Fourth-order moments read by the closure tensors, in symmetric traceless coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourthMoments {
    /// ⟨(m1²−I/3)⊗(m1²−I/3)⟩, ⟨(m2²−I/3)⊗(m2²−I/3)⟩, 4⟨m1m2⊗m1m2⟩, 4⟨m1m3⊗m1m3⟩, 4⟨m2m3⊗m2m3⟩.
    pub r: [Mat5; 5],
    /// ⟨m1m3⊗(m1⊗m3)⟩, ⟨m1m2⊗(m1⊗m2)⟩, ⟨m1m2⊗(m2⊗m1)⟩, ⟨m2m3⊗(m2⊗m3)⟩.
    pub v: [Mat5x9; 4],
}

/// Frame moments under an orientational moment functional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentState {
    /// ⟨m_a ⊗ m_a⟩.
    pub m2: [Mat3; 3],
    /// Gram matrix of (1, m1²−I/3, m2²−m3²).
    pub gram_even: Mat11,
    /// Gram matrices of (m1, m2m3), (m2, m1m3), (m3, m1m2).
    pub gram_odd: [Mat8; 3],
    pub m4: FourthMoments,
}

impl MomentState {
    /// Σ_k w_k f(q_k) over arbitrary (possibly signed) weights.
    pub fn accumulate(nodes: &[Frame], weights: &[f64]) -> Self {
        let mut m2 = [Mat3::zeros(); 3];
        let mut ge = Mat11::zeros();
        let mut go = [Mat8::zeros(); 3];
        let mut r = [Mat5::zeros(); 5];
        let mut v = [Mat5x9::zeros(); 4];
        for (frame, &w) in nodes.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let f = NodeFeatures::new(frame);
            for a in 0..3 {
                m2[a] += f.m[a] * f.m[a].transpose() * w;
            }
            for i in 0..11 {
                let wi = w * f.even[i];
                for j in i..11 {
                    ge[(i, j)] += wi * f.even[j];
                }
            }
            for (g, o) in go.iter_mut().zip(&f.odd) {
                for i in 0..8 {
                    let wi = w * o[i];
                    for j in i..8 {
                        g[(i, j)] += wi * o[j];
                    }
                }
            }
            for (k, s) in [1.0, 1.0, 4.0, 4.0, 4.0].into_iter().enumerate() {
                let c = &f.st[k];
                for i in 0..5 {
                    let wi = w * s * c[i];
                    for j in i..5 {
                        r[k][(i, j)] += wi * c[j];
                    }
                }
            }
            // (symmetric factor, dyad) pairs for the 𝒱 parts.
            let pairs = [(3usize, 0usize), (2, 1), (2, 2), (4, 3)];
            for (slot, (sf, dy)) in pairs.iter().enumerate() {
                let c = &f.st[*sf];
                let d = &f.dyads[*dy];
                for i in 0..5 {
                    let wi = w * c[i];
                    for j in 0..9 {
                        v[slot][(i, j)] += wi * d[j];
                    }
                }
            }
        }
        symmetrize_upper(&mut ge);
        go.iter_mut().for_each(symmetrize_upper);
        r.iter_mut().for_each(symmetrize_upper);
        Self { m2, gram_even: ge, gram_odd: go, m4: FourthMoments { r, v } }
    }

    /// Q_i = ⟨m_i²⟩ − I/3.
    pub fn q(&self) -> QPair {
        let third = Mat3::identity() / 3.0;
        QPair::from_mats(&(self.m2[0] - third), &(self.m2[1] - third))
    }

    /// Third moments ⟨m_a ⊗ m_b m_c⟩ as the 3x5 off-diagonal block of the odd Gram matrices.
    pub fn m3(&self, a: usize) -> SMatrix<f64, 3, 5> {
        self.gram_odd[a].fixed_view::<3, 5>(0, 3).into_owned()
    }

    /// The seven closure tensors, with 𝒱 built for the given e1.
    pub fn closure_tensors(&self, e1: f64) -> ClosureTensors {
        let p = st_embedding();
        let e2 = 1.0 - e1;
        let op5 = |m: &Mat5| Tensor4Op(p * m * p.transpose());
        let op59 = |m: &Mat5x9| Tensor4Op(p * m);
        let [v13, v12, v21, v23] = self.m4.v;
        ClosureTensors {
            r: self.m4.r.map(|m| op5(&m)),
            vq1: op59(&((v13 + v12 * e1 - v21 * e2) * 2.0)),
            vq2: op59(&((v23 - v12 * e1 + v21 * e2) * 2.0)),
        }
    }
}

fn symmetrize_upper<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Ξ₄ of a moment state: −Σ ln det over the four Gram matrices.
pub fn xi4(ms: &MomentState) -> Result<f64> {
    let mut total = 0.0;
    total += neg_logdet(&ms.gram_even)?;
    for g in &ms.gram_odd {
        total += neg_logdet(g)?;
    }
    Ok(total)
}

fn neg_logdet<const N: usize>(m: &SMatrix<f64, N, N>) -> Result<f64> {
    let ch = Cholesky::new(*m).ok_or_else(|| Error::OutOfDomain("moment Gram matrix not positive definite".into()))?;
    Ok(-2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// ℛ1..ℛ5, 𝒱_Q1 and 𝒱_Q2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosureTensors {
    pub r: [Tensor4Op; 5],
    pub vq1: Tensor4Op,
    pub vq2: Tensor4Op,
}

impl ClosureTensors {
    /// Conjugation of every tensor by a rotation.
    pub fn rotate(&self, r: &Mat3) -> Self {
        Self { r: self.r.map(|t| t.rotate(r)), vq1: self.vq1.rotate(r), vq2: self.vq2.rotate(r) }
    }

    /// Flattened 9x9 blocks, one row per tensor: name followed by 81 row-major entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor");
        for i in 0..81 {
            out.push_str(&format!(",c{i}"));
        }
        out.push('\n');
        let named = [
            ("r1", &self.r[0]),
            ("r2", &self.r[1]),
            ("r3", &self.r[2]),
            ("r4", &self.r[3]),
            ("r5", &self.r[4]),
            ("vq1", &self.vq1),
            ("vq2", &self.vq2),
        ];
        for (name, t) in named {
            out.push_str(name);
            for i in 0..9 {
                for j in 0..9 {
                    out.push(',');
                    out.push_str(&crate::fmt_g17(t.0[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// ℳ, 𝒱, 𝒩, 𝒫 both as block tensors and as compact matrices on the 10-dim coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KineticOperators {
    pub m_blocks: [[Tensor4Op; 2]; 2],
    pub v: [Tensor4Op; 2],
    pub n: [Tensor4Op; 2],
    pub p: Tensor4Op,
    /// ℳ acting on 10-dim coordinates.
    pub m: Mat10,
    /// 𝒱: row-major velocity gradient ↦ 10-dim coordinates.
    pub v_mat: SMatrix<f64, 10, 9>,
}

impl KineticOperators {
    /// 𝒩 as a map from 10-dim coordinates to row-major 3x3 stresses; equals `v_mat` transposed.
    pub fn n_mat(&self) -> SMatrix<f64, 9, 10> {
        self.v_mat.transpose()
    }
}

pub fn assemble_operators(ct: &ClosureTensors, params: &PhysicalParams) -> KineticOperators {
    let [r1, r2, r3, r4, r5] = ct.r;
    let (g1, g2, g3) = (params.gamma1, params.gamma2, params.gamma3);
    let m11 = r4.scale(g2) + r3.scale(g3);
    let m12 = r3.scale(-g3);
    let m22 = r5.scale(g1) + r3.scale(g3);
    let p = (r1.scale(params.i22) + r2.scale(params.i11) + r3.scale(params.e1() * params.i11)).scale(params.zeta);
    let mut m = Mat10::zeros();
    m.fixed_view_mut::<5, 5>(0, 0).copy_from(&m11.st_block());
    m.fixed_view_mut::<5, 5>(0, 5).copy_from(&m12.st_block());
    m.fixed_view_mut::<5, 5>(5, 0).copy_from(&m12.st_block());
    m.fixed_view_mut::<5, 5>(5, 5).copy_from(&m22.st_block());
    m = (m + m.transpose()) * 0.5;
    let mut v_mat = SMatrix::<f64, 10, 9>::zeros();
    v_mat.fixed_view_mut::<5, 9>(0, 0).copy_from(&ct.vq1.st_rows());
    v_mat.fixed_view_mut::<5, 9>(5, 0).copy_from(&ct.vq2.st_rows());
    KineticOperators {
        m_blocks: [[m11, m12], [m12, m22]],
        v: [ct.vq1, ct.vq2],
        n: [ct.vq1.transpose(), ct.vq2.transpose()],
        p,
        m,
        v_mat,
    }
}

/// Moments of the maximum entropy state with multipliers B.
pub fn moments_from_density(b: &ConjugatePair, rule: &QuadratureRule) -> MomentState {
    let w = rule.density_weights(Density::Boltzmann(b));
    MomentState::accumulate(&rule.nodes, &w)
}

/// Closure through the maximum entropy state matching Q.
pub fn closure_maxent(q: &QPair, rule: &QuadratureRule, e1: f64) -> Result<(MomentState, ClosureTensors)> {
    let b = solve_conjugate(q, rule)?;
    let ms = moments_from_density(&b, rule);
    let ct = ms.closure_tensors(e1);
    Ok((ms, ct))
}

/// Which closure route to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClosureRoute {
    Maxent,
    #[default]
    Quasi,
}

/// Closure by either route at the default maxent rule.
pub fn closure(q: &QPair, route: ClosureRoute, e1: f64) -> Result<(MomentState, ClosureTensors)> {
    match route {
        ClosureRoute::Maxent => closure_maxent(q, default_rule(), e1),
        ClosureRoute::Quasi => closure_quasi(q, e1),
    }
}

const N_FIXED: usize = 11;

/// Orthonormal basis of the invariant polynomial space on an exact quadrature rule.
struct QuasiSpace {
    rule: QuadratureRule,
    /// Basis function values φ_n(q_k), row = node.
    phi: DMatrix<f64>,
    /// Map from the second-moment features to φ_1..φ_10.
    l_inv: Mat10,
    /// Coefficients of the free basis functions in terms of the candidate monomials.
    cand_coef: DMatrix<f64>,
    /// Coefficients of the free basis functions in terms of the fixed functions.
    fixed_coef: DMatrix<f64>,
    a_even: Vec<Mat11>,
    a_odd: Vec<[Mat8; 3]>,
}

fn candidates(frame: &Frame) -> Vec<f64> {
    let f = NodeFeatures::new(frame);
    let mut c = Vec::with_capacity(66 + 3 * 36);
    for i in 0..11 {
        for j in i..11 {
            c.push(f.even[i] * f.even[j]);
        }
    }
    for o in &f.odd {
        for i in 0..8 {
            for j in i..8 {
                c.push(o[i] * o[j]);
            }
        }
    }
    c
}

fn fixed_functions(frame: &Frame) -> [f64; N_FIXED] {
    let phi = second_moment_features(frame);
    let mut out = [0.0; N_FIXED];
    out[0] = 1.0;
    out[1..].copy_from_slice(&phi);
    out
}

impl QuasiSpace {
    fn build() -> Self {
        // Degree-8 integrands (density times Gram entry) are integrated exactly.
        let rule = build_rule(8, 12).expect("valid sizes");
        let n = rule.len();
        let w = &rule.weights;
        let fixed: Vec<[f64; N_FIXED]> = rule.nodes.iter().map(fixed_functions).collect();
        let mut cov = Mat10::zeros();
        for (f, wk) in fixed.iter().zip(w) {
            for i in 0..10 {
                for j in 0..10 {
                    cov[(i, j)] += wk * f[1 + i] * f[1 + j];
                }
            }
        }
        let chol = Cholesky::new(cov).expect("feature covariance is positive definite");
        let l_inv = chol.l().try_inverse().expect("invertible factor");
        // Orthonormal fixed functions at the nodes: 1 and L⁻¹φ.
        let ortho_fixed: Vec<[f64; N_FIXED]> = fixed
            .iter()
            .map(|f| {
                let v = l_inv * SVector::<f64, 10>::from_column_slice(&f[1..]);
                let mut o = [0.0; N_FIXED];
                o[0] = 1.0;
                o[1..].copy_from_slice(v.as_slice());
                o
            })
            .collect();
        let cand: Vec<Vec<f64>> = rule.nodes.iter().map(candidates).collect();
        let nc = cand[0].len();
        // Project candidates off the fixed span.
        let mut proj = DMatrix::<f64>::zeros(N_FIXED, nc);
        for k in 0..n {
            for f in 0..N_FIXED {
                for c in 0..nc {
                    proj[(f, c)] += w[k] * ortho_fixed[k][f] * cand[k][c];
                }
            }
        }
        let mut wc = DMatrix::<f64>::zeros(n, nc);
        for k in 0..n {
            let sw = w[k].sqrt();
            for c in 0..nc {
                let mut v = cand[k][c];
                for f in 0..N_FIXED {
                    v -= proj[(f, c)] * ortho_fixed[k][f];
                }
                wc[(k, c)] = sw * v;
            }
        }
        let svd = wc.svd(true, true);
        let smax = svd.singular_values.max();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let keep: Vec<usize> = order.into_iter().filter(|&i| svd.singular_values[i] > 1e-10 * smax).collect();
        assert_eq!(keep.len(), 34, "invariant polynomial space has unexpected dimension");
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let dim = N_FIXED + keep.len();
        let mut phi = DMatrix::<f64>::zeros(n, dim);
        for k in 0..n {
            phi.row_mut(k).columns_mut(0, N_FIXED).copy_from_slice(&ortho_fixed[k]);
        }
        let mut cand_coef = DMatrix::<f64>::zeros(keep.len(), nc);
        for (col, &s) in keep.iter().enumerate() {
            let sigma = svd.singular_values[s];
            for k in 0..n {
                phi[(k, N_FIXED + col)] = u[(k, s)] / w[k].sqrt();
            }
            for c in 0..nc {
                cand_coef[(col, c)] = vt[(s, c)] / sigma;
            }
        }
        // φ_free = Σ_c coef_c (cand_c − Σ_f proj_fc·fixed_f)
        let fixed_coef = -(&cand_coef * proj.transpose());
        let mut a_even = Vec::with_capacity(dim);
        let mut a_odd = Vec::with_capacity(dim);
        let feats: Vec<NodeFeatures> = rule.nodes.iter().map(NodeFeatures::new).collect();
        for b in 0..dim {
            let mut ge = Mat11::zeros();
            let mut go = [Mat8::zeros(); 3];
            for k in 0..n {
                let wk = w[k] * phi[(k, b)];
                let f = &feats[k];
                for i in 0..11 {
                    for j in i..11 {
                        ge[(i, j)] += wk * f.even[i] * f.even[j];
                    }
                }
                for (g, o) in go.iter_mut().zip(&f.odd) {
                    for i in 0..8 {
                        for j in i..8 {
                            g[(i, j)] += wk * o[i] * o[j];
                        }
                    }
                }
            }
            symmetrize_upper(&mut ge);
            go.iter_mut().for_each(symmetrize_upper);
            a_even.push(ge);
            a_odd.push(go);
        }
        Self { rule, phi, l_inv, cand_coef, fixed_coef, a_even, a_odd }
    }

    fn get() -> &'static Self {
        static SPACE: OnceLock<QuasiSpace> = OnceLock::new();
        SPACE.get_or_init(Self::build)
    }

    fn dim(&self) -> usize {
        self.phi.ncols()
    }

    fn fixed_coords(&self, q: &QPair) -> DVector<f64> {
        let mut l = DVector::zeros(self.dim());
        l[0] = 1.0;
        let v = self.l_inv * q.to_vec();
        for i in 0..10 {
            l[1 + i] = v[i];
        }
        l
    }

    fn grams(&self, l: &DVector<f64>) -> (Mat11, [Mat8; 3]) {
        let mut ge = Mat11::zeros();
        let mut go = [Mat8::zeros(); 3];
        for b in 0..self.dim() {
            let c = l[b];
            if c == 0.0 {
                continue;
            }
            ge += self.a_even[b] * c;
            for t in 0..3 {
                go[t] += self.a_odd[b][t] * c;
            }
        }
        (ge, go)
    }

    /// Basis coordinates of the projection of a maximum entropy state onto the space.
    fn maxent_coords(&self, q: &QPair) -> Result<DVector<f64>> {
        let rule = default_rule();
        let b = solve_conjugate(q, rule)?;
        let w = rule.density_weights(Density::Boltzmann(&b));
        let nc = self.cand_coef.ncols();
        let mut cand_avg = DVector::<f64>::zeros(nc);
        let mut fixed_avg = DVector::<f64>::zeros(N_FIXED);
        for (node, wk) in rule.nodes.iter().zip(&w) {
            let c = candidates(node);
            for i in 0..nc {
                cand_avg[i] += wk * c[i];
            }
            let f = fixed_functions(node);
            for i in 0..N_FIXED {
                fixed_avg[i] += wk * f[i];
            }
        }
        // Express the fixed averages in the orthonormal fixed basis.
        let mut ortho_avg = DVector::<f64>::zeros(N_FIXED);
        ortho_avg[0] = fixed_avg[0];
        let v = self.l_inv * SVector::<f64, 10>::from_iterator(fixed_avg.iter().skip(1).cloned());
        for i in 0..10 {
            ortho_avg[1 + i] = v[i];
        }
        let free = &self.cand_coef * cand_avg + &self.fixed_coef * ortho_avg;
        let mut l = self.fixed_coords(q);
        for i in 0..free.len() {
            l[N_FIXED + i] = free[i];
        }
        Ok(l)
    }
}

struct Xi4Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn xi4_eval(space: &QuasiSpace, l: &DVector<f64>, with_derivs: bool) -> Option<Xi4Eval> {
    let (ge, go) = space.grams(l);
    let ce = Cholesky::new(ge)?;
    let co: Vec<Cholesky<f64, nalgebra::Const<8>>> =
        go.iter().map(|g| Cholesky::new(*g)).collect::<Option<Vec<_>>>()?;
    let logdet = |d: &[f64]| d.iter().map(|x| x.ln()).sum::<f64>() * 2.0;
    let mut value = -logdet(ce.l().diagonal().as_slice());
    for c in &co {
        value -= logdet(c.l().diagonal().as_slice());
    }
    let nf = space.dim() - N_FIXED;
    if !with_derivs {
        return Some(Xi4Eval { value, grad: DVector::zeros(0), hess: DMatrix::zeros(0, 0) });
    }
    let be: Vec<Mat11> = (0..nf).map(|i| ce.solve(&space.a_even[N_FIXED + i])).collect();
    let bo: Vec<[Mat8; 3]> =
        (0..nf).map(|i| std::array::from_fn(|t| co[t].solve(&space.a_odd[N_FIXED + i][t]))).collect();
    let mut grad = DVector::zeros(nf);
    let mut hess = DMatrix::zeros(nf, nf);
    for i in 0..nf {
        grad[i] = -(be[i].trace() + bo[i].iter().map(|b| b.trace()).sum::<f64>());
        for j in 0..=i {
            let mut h = be[i].component_mul(&be[j].transpose()).sum();
            for t in 0..3 {
                h += bo[i][t].component_mul(&bo[j][t].transpose()).sum();
            }
            hess[(i, j)] = h;
            hess[(j, i)] = h;
        }
    }
    Some(Xi4Eval { value, grad, hess })
}

/// Diagnostics of a quasi-entropy closure solve.
#[derive(Clone, Debug)]
pub struct QuasiSolution {
    pub moments: MomentState,
    pub tensors: ClosureTensors,
    pub xi4: f64,
    /// Norm of ∂Ξ₄ over the free moment directions at the solution.
    pub stationarity: f64,
    /// Eigenvalues of the Ξ₄ Hessian over the free directions, ascending.
    pub hessian_eigenvalues: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes Ξ₄ over moment functionals consistent with Q.
pub fn closure_quasi_detailed(q: &QPair, e1: f64) -> Result<QuasiSolution> {
    let space = QuasiSpace::get();
    let mut l = space.fixed_coords(q);
    if xi4_eval(space, &l, false).is_none() {
        l = space.maxent_coords(q)?;
        if xi4_eval(space, &l, false).is_none() {
            return Err(Error::OutOfDomain("no feasible moment state for the quasi closure".into()));
        }
    }
    let nf = space.dim() - N_FIXED;
    let mut iterations = 0;
    let mut current = xi4_eval(space, &l, true).expect("feasible start");
    while iterations < 100 {
        if current.grad.norm() < 1e-11 {
            break;
        }
        iterations += 1;
        let ch = Cholesky::new(current.hess.clone())
            .ok_or_else(|| Error::NoConvergence("quasi closure Hessian lost definiteness".into()))?;
        let step = ch.solve(&(-&current.grad));
        let decrement = -current.grad.dot(&step);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let mut trial = l.clone();
            for i in 0..nf {
                trial[N_FIXED + i] += t * step[i];
            }
            if let Some(e) = xi4_eval(space, &trial, false) {
                if e.value <= current.value - 0.25 * t * decrement + 1e-13 * current.value.abs() {
                    next = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        match next {
            Some(trial) => {
                l = trial;
                current = xi4_eval(space, &l, true).expect("accepted point is feasible");
            }
            None if decrement < 1e-20 => break,
            None => return Err(Error::NoConvergence("quasi closure line search failed".into())),
        }
    }
    let stationarity = current.grad.norm();
    if stationarity >= 1e-9 {
        return Err(Error::NoConvergence(format!("quasi closure stationarity residual {stationarity:.3e}")));
    }
    let rho = &space.phi * &l;
    let weights: Vec<f64> = space.rule.weights.iter().zip(rho.iter()).map(|(w, r)| w * r).collect();
    let moments = MomentState::accumulate(&space.rule.nodes, &weights);
    let mut hessian_eigenvalues: Vec<f64> = current.hess.symmetric_eigenvalues().iter().cloned().collect();
    hessian_eigenvalues.sort_by(f64::total_cmp);
    Ok(QuasiSolution {
        tensors: moments.closure_tensors(e1),
        moments,
        xi4: current.value,
        stationarity,
        hessian_eigenvalues,
        iterations,
    })
}

/// Closure by minimizing the fourth-order quasi-entropy.
pub fn closure_quasi(q: &QPair, e1: f64) -> Result<(MomentState, ClosureTensors)> {
    let s = closure_quasi_detailed(q, e1)?;
    Ok((s.moments, s.tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::moments;
    use crate::so3::build_rule;
    use crate::tensor::{BiaxialMap, FrameMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let w = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        *Frame::from_rotation_vector(&w).matrix()
    }

    fn random_interior(rng: &mut ChaCha8Rng) -> QPair {
        let b: [f64; 10] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
        moments(&ConjugatePair::from_qpair(&QPair::from_array(&b)), default_rule())
    }

    fn min_st_eig(t: &Tensor4Op) -> f64 {
        t.st_block().symmetric_eigenvalues().min()
    }

    fn reference_point() -> QPair {
        BiaxialMap { s1: 0.62632839, b1: 0.05255237, s2: -0.23765609, b2: 0.28895288 }.eval(&Frame::identity())
    }

    #[test]
    fn uniform_moments() {
        let ms = moments_from_density(&ConjugatePair::default(), &build_rule(8, 8).unwrap());
        for a in 0..3 {
            assert!((ms.m2[a] - Mat3::identity() / 3.0).amax() < 1e-14);
        }
        assert!(ms.q().norm() < 1e-14);
    }

    #[test]
    fn trace_identity_for_any_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rule = build_rule(12, 12).unwrap();
        for _ in 0..5 {
            let b: [f64; 10] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            let ms = moments_from_density(&ConjugatePair::from_qpair(&QPair::from_array(&b)), &rule);
            assert!((ms.m2[0] + ms.m2[1] + ms.m2[2] - Mat3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn r3_uniform_matches_sampling() {
        let ct = moments_from_density(&ConjugatePair::default(), &build_rule(8, 8).unwrap()).closure_tensors(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let y = SymTraceless2::new([0.3, -0.2, 0.5, 0.1, 0.4]).to_mat();
        let mut acc = 0.0;
        for _ in 0..n {
            let fr = Frame::from_matrix_lossy(crate::so3::haar_rotation(&mut rng));
            let p = sym_product(&fr.n(0), &fr.n(1));
            acc += 4.0 * crate::tensor::ddot(&y, &p).powi(2);
        }
        let mc = acc / n as f64;
        let quad = crate::tensor::ddot(&y, &ct.r[2].apply(&y));
        assert!((mc - quad).abs() < 0.02 * quad, "mc {mc} quad {quad}");
    }

    #[test]
    fn isotropy_at_zero_for_both_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ms_q, ct_q) = closure_quasi(&QPair::ZERO, 0.5).unwrap();
        let (ms_m, ct_m) = closure_maxent(&QPair::ZERO, default_rule(), 0.5).unwrap();
        for _ in 0..3 {
            let r = random_rotation(&mut rng);
            for ct in [&ct_q, &ct_m] {
                for t in &ct.r {
                    assert!((t.rotate(&r).0 - t.0).amax() < 1e-10);
                }
            }
        }
        // Both routes agree at the symmetric point on everything forced by symmetry.
        for i in 0..5 {
            assert!((ct_q.r[i].0 - ct_m.r[i].0).amax() < 1e-10, "r{}", i + 1);
        }
        assert!((ms_q.gram_even - ms_m.gram_even).amax() < 1e-10);
    }

    #[test]
    fn quasi_at_zero_is_stationary_uniform_state() {
        let s = closure_quasi_detailed(&QPair::ZERO, 0.5).unwrap();
        assert_eq!(s.iterations, 0);
        assert!(s.stationarity < 1e-11);
    }

    #[test]
    fn tensors_psd_and_operators_pd_at_reference_point() {
        let params = PhysicalParams::default();
        for route in [ClosureRoute::Maxent, ClosureRoute::Quasi] {
            let (_, ct) = closure(&reference_point(), route, params.e1()).unwrap();
            for (i, t) in ct.r.iter().enumerate() {
                assert!((t.0 - t.0.transpose()).amax() < 1e-12);
                assert!(min_st_eig(t) > 0.0, "{route:?} r{}", i + 1);
            }
            let ops = assemble_operators(&ct, &params);
            assert!(ops.m.symmetric_eigenvalues().min() > 0.0);
            assert!(min_st_eig(&ops.p) > 0.0);
            assert_eq!(ops.n_mat(), ops.v_mat.transpose());
            assert_eq!(ops.n[0], ops.v[0].transpose());
        }
    }

    #[test]
    fn synthetic_assembly() {
        let id = Tensor4Op::identity();
        let ct = ClosureTensors { r: [id; 5], vq1: id, vq2: id };
        let ops = assemble_operators(&ct, &PhysicalParams::default());
        assert_eq!(ops.m_blocks[0][0], id.scale(2.0));
        assert_eq!(ops.m_blocks[0][1], id.scale(-1.0));
        assert_eq!(ops.m_blocks[1][1], id.scale(2.0));
    }

    #[test]
    fn outputs_are_symmetric_traceless() {
        let (_, ct) = closure_maxent(&reference_point(), default_rule(), 0.5).unwrap();
        let x = Mat3::new(0.3, -1.0, 0.2, 0.5, 0.1, 0.7, -0.4, 0.9, 0.2);
        for t in ct.r.iter().chain([&ct.vq1, &ct.vq2]) {
            let y = t.apply(&x);
            assert!((y - y.transpose()).amax() < 1e-13);
            assert!(y.trace().abs() < 1e-13);
        }
    }

    #[test]
    fn equivariance_of_both_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_interior(&mut rng);
        for route in [ClosureRoute::Quasi, ClosureRoute::Maxent] {
            let (_, base) = closure(&q, route, 0.5).unwrap();
            let r = random_rotation(&mut rng);
            let (_, rot) = closure(&q.rotate(&r), route, 0.5).unwrap();
            let want = base.rotate(&r);
            let tol = if route == ClosureRoute::Quasi { 1e-9 } else { 1e-6 };
            for i in 0..5 {
                assert!((rot.r[i].0 - want.r[i].0).amax() < tol, "{route:?} r{}", i + 1);
            }
            assert!((rot.vq1.0 - want.vq1.0).amax() < tol);
            assert!((rot.vq2.0 - want.vq2.0).amax() < tol);
        }
    }

    #[test]
    fn quasi_hessian_positive_and_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let q = random_interior(&mut rng);
            let s = closure_quasi_detailed(&q, 0.5).unwrap();
            assert!(s.hessian_eigenvalues[0] > 0.0);
            assert!((s.moments.q() - q).norm() < 1e-10);
            assert!((s.moments.m2[0] + s.moments.m2[1] + s.moments.m2[2] - Mat3::identity()).amax() < 1e-10);
            assert!(xi4(&s.moments).is_ok());
        }
    }

    #[test]
    fn csv_dump_has_seven_rows() {
        let (_, ct) = closure_quasi(&QPair::ZERO, 0.5).unwrap();
        let text = ct.to_csv();
        assert_eq!(text.lines().count(), 8);
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 82);
    }
}
