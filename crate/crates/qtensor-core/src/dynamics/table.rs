//! Kinetic operators per node, either evaluated directly or interpolated from a
//! lazily filled lattice over the biaxial scalars (s1, b1, s2, b2).
//!
//! Table mode reads a frame R from the eigenvectors of Q1 + Q2/4 and the
//! scalars from the diagonal of RᵀQR; the off-diagonal part is dropped. The
//! lattice is offset by half a spacing from the minimizer scalars, so states
//! close to the minimizer manifold stay inside a single multilinear cell.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{SMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::closure::{assemble_operators, closure, ClosureRoute, PhysicalParams};
use crate::equilibrium::BiaxialForm;
use crate::tensor::{st_basis, st_rotation, vec9, Mat10, Mat3, Mat5, QPair, SymTraceless2, Vec10};
use crate::{Error, Result};

pub type Mat10x9 = SMatrix<f64, 10, 9>;

const ENTRY_LEN: usize = 100 + 90 + 25;

/// ℳ, 𝒱 and the symmetric traceless block of 𝒫 for a state in its reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceOperators {
    pub m: Mat10,
    pub v: Mat10x9,
    pub p5: Mat5,
}

impl ReferenceOperators {
    fn from_q(q: &QPair, route: ClosureRoute, params: &PhysicalParams) -> Result<Self> {
        let (_, ct) = closure(q, route, params.e1())?;
        let ops = assemble_operators(&ct, params);
        Ok(Self { m: ops.m, v: ops.v_mat, p5: ops.p.st_block() })
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(ENTRY_LEN);
        out.extend_from_slice(self.m.as_slice());
        out.extend_from_slice(self.v.as_slice());
        out.extend_from_slice(self.p5.as_slice());
        out
    }

    fn from_flat(f: &[f64]) -> Self {
        Self {
            m: Mat10::from_column_slice(&f[..100]),
            v: Mat10x9::from_column_slice(&f[100..190]),
            p5: Mat5::from_column_slice(&f[190..215]),
        }
    }
}

/// Operators at one node: reference operators plus the rotation into the lab frame.
#[derive(Clone, Debug)]
pub struct LocalOperators {
    pub r: Mat3,
    pub d: Mat5,
    pub reference: ReferenceOperators,
}

fn rot10(d: &Mat5, x: &Vec10, transpose: bool) -> Vec10 {
    let mut out = Vec10::zeros();
    for b in 0..2 {
        let blk = x.fixed_rows::<5>(5 * b);
        let y = if transpose { d.transpose() * blk } else { d * blk };
        out.fixed_rows_mut::<5>(5 * b).copy_from(&y);
    }
    out
}

fn st_coords(m: &Mat3) -> nalgebra::SVector<f64, 5> {
    nalgebra::SVector::<f64, 5>::from(SymTraceless2::from_mat(&((m + m.transpose()) * 0.5)).coords)
}

impl LocalOperators {
    /// ℳμ.
    pub fn apply_m(&self, mu: &Vec10) -> Vec10 {
        rot10(&self.d, &(self.reference.m * rot10(&self.d, mu, true)), false)
    }

    /// 𝒱κ with κ_ij = ∂_j v_i.
    pub fn apply_v(&self, kappa: &Mat3) -> Vec10 {
        let k = self.r.transpose() * kappa * self.r;
        rot10(&self.d, &(self.reference.v * vec9(&k)), false)
    }

    /// 𝒩μ = 𝒱ᵀμ as a 3x3 matrix.
    pub fn apply_n(&self, mu: &Vec10) -> Mat3 {
        let w = self.reference.v.transpose() * rot10(&self.d, mu, true);
        let m = crate::tensor::unvec9(&w);
        self.r * m * self.r.transpose()
    }

    /// 𝒫κ as a 3x3 matrix.
    pub fn apply_p(&self, kappa: &Mat3) -> Mat3 {
        let c = self.d * (self.reference.p5 * (self.d.transpose() * st_coords(kappa)));
        let e = st_basis();
        (0..5).fold(Mat3::zeros(), |acc, a| acc + e[a] * c[a])
    }

    /// ℳ in lab coordinates.
    pub fn m_lab(&self) -> Mat10 {
        let mut dd = Mat10::zeros();
        dd.fixed_view_mut::<5, 5>(0, 0).copy_from(&self.d);
        dd.fixed_view_mut::<5, 5>(5, 5).copy_from(&self.d);
        dd * self.reference.m * dd.transpose()
    }

    /// 𝒱 in lab coordinates, acting on row-major vec(κ).
    pub fn v_lab(&self) -> Mat10x9 {
        let mut dd = Mat10::zeros();
        dd.fixed_view_mut::<5, 5>(0, 0).copy_from(&self.d);
        dd.fixed_view_mut::<5, 5>(5, 5).copy_from(&self.d);
        dd * self.reference.v * crate::tensor::mat_rotation(&self.r).transpose()
    }

    /// Symmetric traceless block of 𝒫 in lab coordinates.
    pub fn p5_lab(&self) -> Mat5 {
        self.d * self.reference.p5 * self.d.transpose()
    }
}

/// Frame from the eigenvectors of Q1 + Q2/4 (descending) and the biaxial scalars read off the diagonal.
pub fn reference_form(q: &QPair) -> (Mat3, [f64; 4]) {
    let (a, b) = q.mats();
    let eig = SymmetricEigen::new(a + b * 0.25);
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
    let s = [
        1.5 * ra[(0, 0)],
        0.5 * (ra[(1, 1)] - ra[(2, 2)]),
        1.5 * rb[(0, 0)],
        0.5 * (rb[(1, 1)] - rb[(2, 2)]),
    ];
    (r, s)
}

/// Lazily filled lattice of reference operators with multilinear interpolation.
#[derive(Debug)]
pub struct ClosureTable {
    pub route: ClosureRoute,
    pub params: PhysicalParams,
    pub spacing: f64,
    /// Lattice node 0 sits at origin; the anchor lies at the center of cell 0.
    pub origin: [f64; 4],
    entries: RwLock<HashMap<[i64; 4], Arc<Vec<f64>>>>,
}

impl ClosureTable {
    pub fn new(anchor: [f64; 4], spacing: f64, route: ClosureRoute, params: PhysicalParams) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!("table spacing must be positive (got {spacing})")));
        }
        Ok(Self {
            route,
            params,
            spacing,
            origin: anchor.map(|a| a - 0.5 * spacing),
            entries: RwLock::new(HashMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, s: &[f64; 4]) -> ([i64; 4], [f64; 4]) {
        let mut cell = [0i64; 4];
        let mut t = [0.0; 4];
        for d in 0..4 {
            let u = (s[d] - self.origin[d]) / self.spacing;
            let f = u.floor();
            cell[d] = f as i64;
            t[d] = u - f;
        }
        (cell, t)
    }

    pub fn node_scalars(&self, key: &[i64; 4]) -> [f64; 4] {
        std::array::from_fn(|d| self.origin[d] + key[d] as f64 * self.spacing)
    }

    fn corners(cell: &[i64; 4]) -> [[i64; 4]; 16] {
        std::array::from_fn(|c| std::array::from_fn(|d| cell[d] + ((c >> d) & 1) as i64))
    }

    fn compute(&self, key: &[i64; 4]) -> Result<Vec<f64>> {
        let s = self.node_scalars(key);
        let form = BiaxialForm::new(s[0], s[1], s[2], s[3]);
        if form.range_margin() <= 0.0 {
            return Err(Error::OutOfDomain(format!("closure table node {s:?} outside the admissible range")));
        }
        Ok(ReferenceOperators::from_q(&form.to_qpair(), self.route, &self.params)?.to_flat())
    }

    fn unique_cells(&self, scalars: &[[f64; 4]]) -> Vec<[i64; 4]> {
        let mut cells: Vec<[i64; 4]> = scalars.iter().map(|s| self.locate(s).0).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    /// Fills every lattice node needed by the given scalar tuples.
    pub fn ensure(&self, scalars: &[[f64; 4]]) -> Result<()> {
        self.ensure_cells(&self.unique_cells(scalars))
    }

    fn ensure_cells(&self, cells: &[[i64; 4]]) -> Result<()> {
        let mut missing: Vec<[i64; 4]> = {
            let map = self.entries.read().expect("table lock");
            let mut v: Vec<[i64; 4]> =
                cells.iter().flat_map(Self::corners).filter(|k| !map.contains_key(k)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        if missing.is_empty() {
            return Ok(());
        }
        let computed: Vec<Result<Vec<f64>>> = missing.par_iter().map(|k| self.compute(k)).collect();
        let mut map = self.entries.write().expect("table lock");
        for (k, e) in missing.drain(..).zip(computed) {
            map.insert(k, Arc::new(e?));
        }
        Ok(())
    }

    fn gather(&self, cell: &[i64; 4]) -> Result<[Arc<Vec<f64>>; 16]> {
        let map = self.entries.read().expect("table lock");
        let corners = Self::corners(cell);
        let mut out = Vec::with_capacity(16);
        for key in &corners {
            let e = map
                .get(key)
                .ok_or_else(|| Error::InvalidArgument(format!("closure table node {key:?} not filled")))?;
            out.push(Arc::clone(e));
        }
        Ok(out.try_into().expect("sixteen corners"))
    }

    fn blend(corners: &[Arc<Vec<f64>>; 16], t: &[f64; 4]) -> ReferenceOperators {
        let mut acc = [0.0; ENTRY_LEN];
        for (c, e) in corners.iter().enumerate() {
            let w: f64 = (0..4).map(|d| if (c >> d) & 1 == 1 { t[d] } else { 1.0 - t[d] }).product();
            for (a, x) in acc.iter_mut().zip(e.iter()) {
                *a += w * x;
            }
        }
        ReferenceOperators::from_flat(&acc)
    }

    /// Interpolated reference operators; the needed nodes must have been filled by [`ClosureTable::ensure`].
    pub fn interpolate(&self, s: &[f64; 4]) -> Result<ReferenceOperators> {
        let (cell, t) = self.locate(s);
        Ok(Self::blend(&self.gather(&cell)?, &t))
    }

    pub fn local(&self, q: &QPair) -> Result<LocalOperators> {
        let (r, s) = reference_form(q);
        self.ensure(&[s])?;
        Ok(LocalOperators { r, d: st_rotation(&r), reference: self.interpolate(&s)? })
    }

    /// Operators for many states at once.
    pub fn local_many(&self, qs: &[QPair]) -> Result<Vec<LocalOperators>> {
        let forms: Vec<(Mat3, [f64; 4])> = qs.par_iter().map(reference_form).collect();
        let scalars: Vec<[f64; 4]> = forms.iter().map(|f| f.1).collect();
        let cells = self.unique_cells(&scalars);
        self.ensure_cells(&cells)?;
        let data: Vec<[Arc<Vec<f64>>; 16]> = cells.iter().map(|c| self.gather(c)).collect::<Result<_>>()?;
        Ok(forms
            .par_iter()
            .map(|(r, s)| {
                let (cell, t) = self.locate(s);
                let k = cells.binary_search(&cell).expect("cell was collected");
                LocalOperators { r: *r, d: st_rotation(r), reference: Self::blend(&data[k], &t) }
            })
            .collect())
    }

    /// Filled nodes in key order: key, scalars, and ℳ, 𝒱, 𝒫-block entries (column-major, 215 values).
    pub fn nodes(&self) -> Vec<([i64; 4], [f64; 4], Vec<f64>)> {
        let map = self.entries.read().expect("table lock");
        let mut keys: Vec<[i64; 4]> = map.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| (k, self.node_scalars(&k), map[&k].as_ref().clone())).collect()
    }

    /// Largest relative deviation of ℳ, 𝒱, 𝒫 from direct evaluation over the samples.
    pub fn validate(&self, samples: &[QPair]) -> Result<f64> {
        let mut worst = 0.0f64;
        for q in samples {
            let t = self.local(q)?;
            let d = direct_operators(q, self.route, &self.params)?;
            let rel = |a: f64, b: f64| a / b.max(1e-300);
            worst = worst
                .max(rel((t.m_lab() - d.m_lab()).norm(), d.m_lab().norm()))
                .max(rel((t.v_lab() - d.v_lab()).norm(), d.v_lab().norm()))
                .max(rel((t.p5_lab() - d.p5_lab()).norm(), d.p5_lab().norm()));
        }
        Ok(worst)
    }
}

/// Operators from a direct closure evaluation at q.
pub fn direct_operators(q: &QPair, route: ClosureRoute, params: &PhysicalParams) -> Result<LocalOperators> {
    Ok(LocalOperators {
        r: Mat3::identity(),
        d: Mat5::identity(),
        reference: ReferenceOperators::from_q(q, route, params)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Frame;

    const MIN: [f64; 4] = [0.6263283938, 0.0525523709, -0.2376560923, 0.2889528763];

    fn table() -> ClosureTable {
        ClosureTable::new(MIN, 0.02, ClosureRoute::Quasi, PhysicalParams::default()).unwrap()
    }

    #[test]
    fn reference_form_recovers_scalars_and_frame() {
        let f = BiaxialForm::new(MIN[0], MIN[1], MIN[2], MIN[3]);
        let r = *Frame::from_rotation_vector(&crate::tensor::Vec3::new(0.3, -0.7, 1.1)).matrix();
        let q = f.to_qpair().rotate(&r);
        let (rr, s) = reference_form(&q);
        for d in 0..4 {
            assert!((s[d] - MIN[d]).abs() < 1e-12);
        }
        let back = f.with_frame(Frame::from_matrix_lossy(rr)).to_qpair();
        assert!((back - q).norm() < 1e-12);
    }

    #[test]
    fn rotated_operators_match_direct_on_manifold() {
        let t = table();
        let f = BiaxialForm::new(MIN[0], MIN[1], MIN[2], MIN[3]);
        let r = *Frame::from_rotation_vector(&crate::tensor::Vec3::new(-0.4, 0.2, 0.9)).matrix();
        let q = f.to_qpair().rotate(&r);
        let direct = direct_operators(&q, ClosureRoute::Quasi, &PhysicalParams::default()).unwrap();
        let local = t.local(&q).unwrap();
        // The anchor is a cell center, so the lattice value differs from the exact one by O(h²).
        let err = (local.m_lab() - direct.m_lab()).norm() / direct.m_lab().norm();
        assert!(err < 1e-3, "{err}");
        let err = t.validate(&[q]).unwrap();
        assert!(err < 1e-3, "{err}");
        let mu = Vec10::from_fn(|i, _| (i as f64 * 0.7).sin());
        let kappa = Mat3::new(0.1, -0.3, 0.0, 0.5, -0.1, 0.0, 0.2, 0.4, 0.0);
        assert!((local.apply_m(&mu) - local.m_lab() * mu).norm() < 1e-12);
        assert!((local.apply_v(&kappa) - local.v_lab() * vec9(&kappa)).norm() < 1e-12);
        let n = local.apply_n(&mu);
        let lhs = crate::tensor::ddot(&n, &kappa);
        assert!((lhs - mu.dot(&local.apply_v(&kappa))).abs() < 1e-12);
        let pk = local.apply_p(&kappa);
        assert!(crate::tensor::ddot(&pk, &kappa) >= -1e-14);
    }

    #[test]
    fn interpolation_is_multilinear_inside_a_cell() {
        let t = table();
        let a = [MIN[0] + 0.004, MIN[1] - 0.003, MIN[2], MIN[3] + 0.002];
        let b = [MIN[0] - 0.002, MIN[1] + 0.001, MIN[2] + 0.003, MIN[3]];
        let mid: [f64; 4] = std::array::from_fn(|d| 0.5 * (a[d] + b[d]));
        t.ensure(&[a, b, mid]).unwrap();
        assert_eq!(t.len(), 16);
        // Along a line, a multilinear function is a polynomial of degree ≤ 4; check continuity only.
        let ma = t.interpolate(&a).unwrap().m;
        let mm = t.interpolate(&mid).unwrap().m;
        let mb = t.interpolate(&b).unwrap().m;
        assert!((mm - (ma + mb) * 0.5).norm() < 1e-2 * mm.norm());
    }
}
