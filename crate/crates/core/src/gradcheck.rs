//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub epsilon: f64,
    /// Check only this many randomly chosen coordinates (all when `None`).
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            sample: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(θ+εe) − f(θ−εe)) / 2ε` coordinate-wise.
pub fn check_gradient<F>(mut f: F, point: &[f64], analytic: &[f64], opts: &CheckOptions) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if opts.epsilon <= 0.0 || !opts.epsilon.is_finite() {
        return Err(Error::Contract(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape {
            op: "check_gradient",
            lhs: vec![point.len()],
            rhs: vec![analytic.len()],
        });
    }
    let coords: Vec<usize> = match opts.sample {
        Some(n) if n < point.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, point.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..point.len()).collect(),
    };

    let mut probe = point.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + opts.epsilon;
        let fp = f(&probe);
        probe[i] = orig - opts.epsilon;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective probing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * opts.epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
