//! Central finite differences, used to check `Tape::backward`.

use crate::error::Result;

/// Step used for gradient checks on `O(1)`-scaled parameters in `f64`.
pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_RTOL: f64 = 1e-5;
pub const GRADCHECK_ATOL: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for coordinate `i`.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x)?;
    x[i] = orig - h;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Whether an analytic derivative agrees with its finite-difference estimate.
pub fn grads_close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compares `analytic[i]` with central differences of `f` at the listed coordinates.
pub fn check_coordinates<F>(
    f: &mut F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<Vec<CoordinateCheck>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let numeric = central_difference(f, &mut work, i, h)?;
            Ok(CoordinateCheck {
                index: i,
                analytic: analytic[i],
                numeric,
                passed: grads_close(analytic[i], numeric, rtol, atol),
            })
        })
        .collect()
}
