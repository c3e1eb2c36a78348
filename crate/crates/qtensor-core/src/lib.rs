//! Two-tensor hydrodynamics for biaxial nematic liquid crystals.
//!
//! The crate covers the algebra of symmetric traceless tensor pairs, SO(3)
//! quadrature, the original and quasi entropies, closure of the fourth-order
//! kinetic tensors, bulk-energy minimizers and their Hessian kernels, a
//! periodic 2D coupled solver, and tools for studying the small-ε limit.

pub mod closure;
pub mod dynamics;
pub mod entropy;
pub mod equilibrium;
pub mod limit;
pub mod so3;
pub mod tensor;

/// Errors raised by numerical routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("outside the admissible domain: {0}")]
    OutOfDomain(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("search failed: {0}")]
    SearchFailed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Formats a float like C's `%.17g`.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // The exponent is taken after rounding to 17 significant digits.
    let sci = format!("{:.16e}", x);
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    if (-4..17).contains(&e) {
        let decimals = (16 - e).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa);
        format!("{}e{}{:02}", m, if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::fmt_g17;

    #[test]
    fn g17_matches_c_printf() {
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(fmt_g17(123456.0), "123456");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(1.0 / 3.0), "0.33333333333333331");
    }
}
