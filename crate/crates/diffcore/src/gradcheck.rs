use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smallest denominator used when forming a relative error, so that two
/// near-zero gradients are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Number of coordinates to probe, drawn uniformly across all
    /// parameters. `None` checks every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            samples: Some(200),
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn full_sweep(mut self) -> Self {
        self.samples = None;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// finite differences `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// `f` receives a fresh graph and one parameter handle per tensor in
/// `params`, and returns the scalar output.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::NotScalar(g.shape(out).to_vec()));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.numel();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match opts.samples {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = index::sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
        worst: None,
        tol: opts.tol,
    };
    let mut probe = params.to_vec();
    for flat in coords {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let orig = params[p].data()[i];

        probe[p].data_mut()[i] = orig + opts.eps;
        let (gp, _, op) = eval(&probe)?;
        let up = gp.value(op).item();
        probe[p].data_mut()[i] = orig - opts.eps;
        let (gm, _, om) = eval(&probe)?;
        let down = gm.value(om).item();
        probe[p].data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * opts.eps);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let a = analytic[p].data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((p, i));
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            // mse over one row of width 3 is mean(x^2); scale by 3 to get sum
            let l = g.mse(v[0], &Tensor::zeros([3]), &[1.0])?;
            g.scale(l, 3.0)
        };
        let report = grad_check(f, &[x.clone()], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.coords_checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");

        let mut g = Graph::new();
        let v = g.param(x);
        let l = f(&mut g, &[v]).unwrap();
        let grads = g.backward(l).unwrap();
        let an = grads.get(v).unwrap().data();
        for (a, e) in an.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([2, 2], vec![0.3, -1.0, 2.0, 4.0]).unwrap();
        let f = |g: &mut Graph, _v: &[Var]| Ok(g.constant(Tensor::scalar(7.0)));
        let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn subsamples_large_parameter_sets() {
        let x = Tensor::new([30, 20], (0..600).map(|i| i as f64 * 1e-3).collect()).unwrap();
        let f = |g: &mut Graph, v: &[Var]| g.mse(v[0], &Tensor::zeros([30, 20]), &[1.0; 30]);
        let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.coords_checked, 200);
        assert!(report.passed());
    }
}
