//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param_err: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (sampled), or all if `None`.
    pub max_coords: Option<usize>,
    /// Denominator floor for the relative error, so coordinates with
    /// near-zero true gradient are judged by absolute error instead.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tolerance: 1e-4, max_coords: None, rel_floor: 1e-6, seed: 0 }
    }
}

/// Compares tape gradients of `loss_fn` with `(f(θ+ε) − f(θ−ε)) / 2ε`.
/// `loss_fn` receives the parameters as tape variables, in order.
pub fn grad_check<F>(loss_fn: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Contract("grad_check needs eps > 0".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("grad_check loss".into()))
        }
    };

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, (_, p))| tape.param(p, i)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric("grad_check loss".into()));
        }
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut per_param_err = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;

    for (pi, (name, p)) in params.iter().enumerate() {
        let zero = Tensor::zeros(p.rows(), p.cols());
        let grad = analytic.get(pi).unwrap_or(&zero);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.rel_floor);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param_err.insert(name.clone(), worst);
    }

    Ok(GradCheckReport {
        max_rel_err,
        per_param_err,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_has_exact_unit_gradient() {
        let theta = Tensor::row_vector(vec![0.3, -1.2, 4.0]);
        let report = grad_check(|t, v| t.sum(v[0]), &[("theta".into(), theta)], &GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn quadratic_matches_at_tight_tolerance() {
        let theta = Tensor::row_vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&theta, 0);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[2.0, 4.0]);

        let opts = GradCheckOptions { tolerance: 1e-8, ..Default::default() };
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[("theta".into(), theta)],
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let theta = Tensor::row_vector(vec![1e200]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[("theta".into(), theta)],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn passed_flag_tracks_tolerance() {
        let theta = Tensor::row_vector(vec![1.0]);
        let opts = GradCheckOptions { tolerance: 0.0, eps: 0.5, ..Default::default() };
        // cubic: FD with a large eps has visible truncation error
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let cube = t.mul(sq, v[0])?;
                t.sum(cube)
            },
            &[("theta".into(), theta)],
            &opts,
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.passed, r.max_rel_err <= r.tolerance);
    }
}
