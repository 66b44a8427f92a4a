//! Central-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::params::{Gradients, ParamId, ParameterStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Step for `(f(θ+h) − f(θ−h)) / 2h`.
    pub h: f64,
    /// Number of coordinates probed (per tensor when `per_tensor`).
    pub probes: usize,
    pub per_tensor: bool,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            probes: 32,
            per_tensor: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<FdProbe>,
    pub probes: usize,
    /// Probes where both derivatives lie below the rounding resolution of
    /// the central difference; they are excluded from `max_rel_error`.
    pub below_resolution: usize,
}

/// Ulps of the objective assumed lost to rounding in one evaluation.
pub const ROUNDING_ULPS: f64 = 16.0;

/// Smallest derivative a central difference with step `h` can resolve at
/// objective values `fp`, `fm`.
pub fn fd_resolution(fp: f64, fm: f64, h: f64) -> f64 {
    ROUNDING_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * h)
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` against central
/// differences on a random subset of trainable coordinates.
///
/// `f` evaluates the scalar objective and its gradient at the given
/// parameters. Only the loss is used at the perturbed points.
pub fn fd_check<F>(f: F, params: &ParameterStore, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = f(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let trainable: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    if opts.per_tensor {
        for &(id, n) in &trainable {
            let k = opts.probes.min(n);
            coords.extend(sample(&mut rng, n, k).into_iter().map(|i| (id, i)));
        }
    } else {
        let total: usize = trainable.iter().map(|(_, n)| n).sum();
        let k = opts.probes.min(total);
        let mut picks = sample(&mut rng, total, k).into_vec();
        picks.sort_unstable();
        for flat in picks {
            let mut rem = flat;
            for &(id, n) in &trainable {
                if rem < n {
                    coords.push((id, rem));
                    break;
                }
                rem -= n;
            }
        }
    }

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        probes: coords.len(),
        below_resolution: 0,
    };
    for (id, i) in coords {
        let orig = work.value(id).as_slice()[i];
        work.value_mut(id).as_mut_slice()[i] = orig + opts.h;
        let (fp, _) = f(&work)?;
        work.value_mut(id).as_mut_slice()[i] = orig - opts.h;
        let (fm, _) = f(&work)?;
        work.value_mut(id).as_mut_slice()[i] = orig;

        let numeric = (fp - fm) / (2.0 * opts.h);
        let analytic = grads.get(id).as_slice()[i];
        let floor = fd_resolution(fp, fm, opts.h);
        if analytic.abs() <= floor && numeric.abs() <= floor {
            report.below_resolution += 1;
            continue;
        }
        let err = rel_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(FdProbe {
                param: params.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::graph::Graph;
    use crate::tensor::Mat;

    fn quadratic_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("p", Mat::from_rows(&[vec![0.7, -1.3, 2.0], vec![0.2, 0.9, -0.4]]))
            .unwrap();
        s
    }

    fn quadratic(s: &ParameterStore, fault: f64) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(s);
        let x = g.param(s.id("p").unwrap());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let mut grads = g.backward(loss)?;
        grads.scale(fault);
        Ok((g.value(loss)[(0, 0)], grads))
    }

    #[test]
    fn correct_quadratic_is_tight() {
        let r = fd_check(|s| quadratic(s, 1.0), &quadratic_store(), &FdOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.probes, 6);
    }

    /// `(x + y) − y` has zero gradient in `y`; the difference quotient
    /// sees only rounding, which must not count as an error.
    #[test]
    fn structural_zero_is_below_resolution() {
        let mut s = ParameterStore::new();
        s.add("x", Mat::scalar(1.0)).unwrap();
        s.add("y", Mat::scalar(0.3)).unwrap();
        let f = |s: &ParameterStore| {
            let mut g = Graph::new(s);
            let x = g.param(s.id("x").unwrap());
            let y = g.param(s.id("y").unwrap());
            let xy = g.add(x, y);
            let out = g.sub(xy, y);
            Ok((g.value(out)[(0, 0)], g.backward(out)?))
        };
        let r = fd_check(f, &s, &FdOptions::default()).unwrap();
        assert_eq!(r.probes, 2);
        assert!(r.below_resolution <= 1);
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn zero_analytic_against_real_slope_is_caught() {
        let r = fd_check(|s| quadratic(s, 0.0), &quadratic_store(), &FdOptions::default()).unwrap();
        assert_eq!(r.below_resolution, 0);
        assert!((r.max_rel_error - 1.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let r = fd_check(|s| quadratic(s, 2.0), &quadratic_store(), &FdOptions::default()).unwrap();
        // |2g − g| / max(|2g|, |g|) = 1/2
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }
}
