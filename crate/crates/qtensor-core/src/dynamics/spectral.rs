//! Fourier machinery on a doubly periodic grid.
//!
//! Derivative symbols have the Nyquist wavenumber set to zero, and every
//! second-order operator is built from products of those first-order symbols.
//! That keeps discrete integration by parts exact, which the energy law relies on.

use std::sync::Arc;

use nalgebra::SMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::tensor::{st_basis, Mat10, Mat3, SymTraceless2};
use crate::{Error, Result};

/// Periodic box [0, lx) × [0, ly) with nx × ny nodes, index iy·nx + ix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self { nx: 64, ny: 64, lx: 2.0 * std::f64::consts::PI, ly: 2.0 * std::f64::consts::PI }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("grid.nx", self.nx), ("grid.ny", self.ny)] {
            if n < 2 || !n.is_power_of_two() {
                return Err(Error::InvalidArgument(format!("{name} must be a power of two ≥ 2 (got {n})")));
            }
        }
        for (name, l) in [("grid.lx", self.lx), ("grid.ly", self.ly)] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive (got {l})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Area of one grid cell.
    pub fn cell_area(&self) -> f64 {
        self.lx * self.ly / self.len() as f64
    }

    pub fn coords(&self, idx: usize) -> (f64, f64) {
        let (ix, iy) = (idx % self.nx, idx / self.nx);
        (ix as f64 * self.lx / self.nx as f64, iy as f64 * self.ly / self.ny as f64)
    }
}

fn wavenumbers(n: usize, l: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / l;
    (0..n)
        .map(|i| {
            if 2 * i == n {
                0.0
            } else if 2 * i < n {
                base * i as f64
            } else {
                base * (i as f64 - n as f64)
            }
        })
        .collect()
}

/// Coordinates of Q ↦ 𝒮(k ⊗ Qk) for an in-plane wavevector.
fn div_block(kx: f64, ky: f64) -> SMatrix<f64, 5, 5> {
    let e = st_basis();
    let k = crate::tensor::Vec3::new(kx, ky, 0.0);
    SMatrix::<f64, 5, 5>::from_fn(|a, b| {
        let w = e[b] * k;
        let m: Mat3 = k * w.transpose();
        SymTraceless2::from_mat(&((m + m.transpose()) * 0.5)).coords[a]
    })
}

/// Elastic coefficients: D₁ = [[c22, c24], [c24, c23]], D₂ = [[c28, c210], [c210, c29]].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticCoefficients {
    pub c22: f64,
    pub c23: f64,
    pub c24: f64,
    pub c28: f64,
    pub c29: f64,
    pub c210: f64,
}

impl Default for ElasticCoefficients {
    fn default() -> Self {
        Self { c22: 1.0, c23: 1.0, c24: 0.0, c28: 1.0, c29: 1.0, c210: 0.0 }
    }
}

impl ElasticCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c22, self.c23, self.c24, self.c28, self.c29, self.c210];
        if !all.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("elastic coefficients must be finite".into()));
        }
        for (name, c) in [("c22", self.c22), ("c23", self.c23), ("c28", self.c28), ("c29", self.c29)] {
            if c <= 0.0 {
                return Err(Error::InvalidArgument(format!("elastic.{name} must be positive (got {c})")));
            }
        }
        if self.c24 * self.c24 >= self.c22 * self.c23 {
            return Err(Error::InvalidArgument("elastic: c24² < c22·c23 violated (D1 not positive definite)".into()));
        }
        if self.c210 * self.c210 >= self.c28 * self.c29 {
            return Err(Error::InvalidArgument(
                "elastic: c210² < c28·c29 violated (D2 not positive definite)".into(),
            ));
        }
        Ok(())
    }
}

/// FFT plans, wavenumbers and per-mode elastic symbols for one grid.
pub struct Spectral {
    pub grid: Grid,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
    /// Symbol of 𝒢 per mode in the 10-dim coordinates.
    elastic: Vec<Mat10>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

pub type CField = Vec<Complex64>;

impl Spectral {
    pub fn new(grid: Grid, ec: &ElasticCoefficients) -> Result<Self> {
        grid.validate()?;
        let mut planner = FftPlanner::new();
        let kx = wavenumbers(grid.nx, grid.lx);
        let ky = wavenumbers(grid.ny, grid.ly);
        let mut elastic = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (a, b) = (kx[ix], ky[iy]);
                let k2 = a * a + b * b;
                let bk = div_block(a, b);
                let mut g = Mat10::zeros();
                let d1 = [[ec.c22, ec.c24], [ec.c24, ec.c23]];
                let d2 = [[ec.c28, ec.c210], [ec.c210, ec.c29]];
                for r in 0..2 {
                    for c in 0..2 {
                        let blk = SMatrix::<f64, 5, 5>::identity() * (d1[r][c] * k2) + bk * d2[r][c];
                        g.fixed_view_mut::<5, 5>(5 * r, 5 * c).copy_from(&blk);
                    }
                }
                elastic.push(g);
            }
        }
        Ok(Self {
            grid,
            kx,
            ky,
            fx: planner.plan_fft_forward(grid.nx),
            fy: planner.plan_fft_forward(grid.ny),
            ix: planner.plan_fft_inverse(grid.nx),
            iy: planner.plan_fft_inverse(grid.ny),
            elastic,
        })
    }

    pub fn k(&self, idx: usize) -> (f64, f64) {
        (self.kx[idx % self.grid.nx], self.ky[idx / self.grid.nx])
    }

    pub fn elastic_symbol(&self, idx: usize) -> &Mat10 {
        &self.elastic[idx]
    }

    fn transform(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        row.process(data);
        let mut buf = vec![Complex64::default(); ny];
        for ix in 0..nx {
            for iy in 0..ny {
                buf[iy] = data[iy * nx + ix];
            }
            col.process(&mut buf);
            for iy in 0..ny {
                data[iy * nx + ix] = buf[iy];
            }
        }
    }

    pub fn forward(&self, f: &[f64]) -> CField {
        let mut d: CField = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut d, &self.fx, &self.fy);
        d
    }

    /// Inverse transform, normalized, real part.
    pub fn inverse(&self, mut d: CField) -> Vec<f64> {
        self.transform(&mut d, &self.ix, &self.iy);
        let s = 1.0 / self.grid.len() as f64;
        d.iter().map(|c| c.re * s).collect()
    }

    /// ∂_x (axis 0) or ∂_y (axis 1) applied to a spectrum.
    pub fn derivative(&self, hat: &[Complex64], axis: usize) -> CField {
        hat.iter()
            .enumerate()
            .map(|(i, c)| {
                let (a, b) = self.k(i);
                let k = if axis == 0 { a } else { b };
                c * Complex64::new(0.0, k)
            })
            .collect()
    }

    pub fn deriv_real(&self, hat: &[Complex64], axis: usize) -> Vec<f64> {
        self.inverse(self.derivative(hat, axis))
    }

    /// −|k|² with the same zeroed Nyquist symbols.
    pub fn laplacian_symbol(&self, idx: usize) -> f64 {
        let (a, b) = self.k(idx);
        -(a * a + b * b)
    }

    /// Removes the gradient part of the in-plane components in place.
    pub fn leray(&self, vx: &mut [Complex64], vy: &mut [Complex64]) {
        for i in 0..vx.len() {
            let (a, b) = self.k(i);
            let k2 = a * a + b * b;
            if k2 > 0.0 {
                let dot = vx[i] * a + vy[i] * b;
                vx[i] -= dot * (a / k2);
                vy[i] -= dot * (b / k2);
            }
        }
    }

    /// Applies the elastic symbol to ten coordinate spectra.
    pub fn apply_elastic(&self, q_hat: &[CField]) -> Vec<CField> {
        let n = self.grid.len();
        let mut out = vec![vec![Complex64::default(); n]; 10];
        for i in 0..n {
            let g = &self.elastic[i];
            for r in 0..10 {
                let mut acc = Complex64::default();
                for c in 0..10 {
                    let w = g[(r, c)];
                    if w != 0.0 {
                        acc += q_hat[c][i] * w;
                    }
                }
                out[r][i] = acc;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectral(n: usize) -> Spectral {
        let g = Grid { nx: n, ny: n, ..Grid::default() };
        Spectral::new(g, &ElasticCoefficients::default()).unwrap()
    }

    #[test]
    fn derivative_of_trig_mode_is_exact() {
        let s = spectral(16);
        let f: Vec<f64> = (0..s.grid.len()).map(|i| {
            let (x, y) = s.grid.coords(i);
            (3.0 * x).sin() * (2.0 * y).cos()
        }).collect();
        let hat = s.forward(&f);
        let dx = s.deriv_real(&hat, 0);
        let dy = s.deriv_real(&hat, 1);
        for i in 0..f.len() {
            let (x, y) = s.grid.coords(i);
            assert!((dx[i] - 3.0 * (3.0 * x).cos() * (2.0 * y).cos()).abs() < 1e-12);
            assert!((dy[i] + 2.0 * (3.0 * x).sin() * (2.0 * y).sin()).abs() < 1e-12);
        }
        let back = s.inverse(hat);
        assert!(back.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn derivative_is_skew() {
        let s = spectral(8);
        let f: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let g: Vec<f64> = (0..64).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let dg = s.deriv_real(&s.forward(&g), 0);
        let df = s.deriv_real(&s.forward(&f), 0);
        let a: f64 = f.iter().zip(&dg).map(|(x, y)| x * y).sum();
        let b: f64 = df.iter().zip(&g).map(|(x, y)| x * y).sum();
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn leray_removes_divergence() {
        let s = spectral(16);
        let n = s.grid.len();
        let vx: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        let vy: Vec<f64> = (0..n).map(|i| ((i * 5 % 17) as f64).cos()).collect();
        let (mut hx, mut hy) = (s.forward(&vx), s.forward(&vy));
        s.leray(&mut hx, &mut hy);
        let dx = s.derivative(&hx, 0);
        let dy = s.derivative(&hy, 1);
        let div: f64 = dx.iter().zip(&dy).map(|(a, b)| (a + b).norm()).fold(0.0, f64::max);
        assert!(div < 1e-12);
        let (mut hx2, mut hy2) = (hx.clone(), hy.clone());
        s.leray(&mut hx2, &mut hy2);
        assert!(hx.iter().zip(&hx2).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn elastic_symbol_is_psd() {
        let s = spectral(8);
        for i in 0..s.grid.len() {
            let g = s.elastic_symbol(i);
            assert!((g - g.transpose()).amax() < 1e-14);
            let e = g.symmetric_eigenvalues();
            assert!(e.min() > -1e-12);
        }
    }

    #[test]
    fn elastic_pd_conditions() {
        let mut ec = ElasticCoefficients::default();
        ec.c24 = 1.5;
        assert!(ec.validate().unwrap_err().to_string().contains("c24"));
        let mut ec = ElasticCoefficients::default();
        ec.c210 = 1.0;
        assert!(ec.validate().unwrap_err().to_string().contains("c210"));
        assert!(ElasticCoefficients::default().validate().is_ok());
    }

    #[test]
    fn grid_requires_power_of_two() {
        assert!(Grid { nx: 12, ..Grid::default() }.validate().is_err());
    }
}
