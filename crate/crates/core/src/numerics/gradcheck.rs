//! Central finite-difference verification of analytic gradients.

use super::{Matrix, Rng};
use crate::error::{CoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks every coordinate of every parameter.
///
/// `f` returns the scalar value and its analytic gradient (one matrix per
/// parameter); only the value is used at the probe points.
pub fn grad_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    grad_check_impl(f, params, eps, None)
}

/// Like [`grad_check`] but probes at most `per_param` random coordinates of
/// each parameter, for models too large to check exhaustively.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Matrix],
    eps: f64,
    per_param: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    grad_check_impl(f, params, eps, Some((per_param, rng)))
}

fn grad_check_impl<F>(
    mut f: F,
    params: &[Matrix],
    eps: f64,
    sampling: Option<(usize, &mut Rng)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoeError::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(CoeError::Probe("base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(CoeError::Dimension {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }

    let coords: Vec<(usize, usize)> = match sampling {
        None => params
            .iter()
            .enumerate()
            .flat_map(|(p, m)| (0..m.data().len()).map(move |c| (p, c)))
            .collect(),
        Some((per_param, rng)) => {
            let mut out = Vec::new();
            for (p, m) in params.iter().enumerate() {
                let n = m.data().len();
                if n <= per_param {
                    out.extend((0..n).map(|c| (p, c)));
                } else {
                    let mut idx: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut idx);
                    idx.truncate(per_param);
                    idx.sort_unstable();
                    out.extend(idx.into_iter().map(|c| (p, c)));
                }
            }
            out
        }
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates_checked: coords.len(),
    };
    for (p, c) in coords {
        let orig = params[p].data()[c];
        probe[p].data_mut()[c] = orig + eps;
        let plus = f(&probe)?.0;
        probe[p].data_mut()[c] = orig - eps;
        let minus = f(&probe)?.0;
        probe[p].data_mut()[c] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoeError::Probe(format!("parameter {p}, coordinate {c}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[p].data()[c], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (p, c);
        }
    }
    Ok(report)
}
