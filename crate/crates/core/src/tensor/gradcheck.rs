use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor], with_grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if with_grad { g.param(p) } else { g.leaf(p) })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(
            "grad_check objective must be scalar".into(),
        ));
    }
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric("grad_check objective is not finite".into()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+eps·e) − f(θ−eps·e)) / 2eps`, coordinate by coordinate.
///
/// `f` receives the graph and one var per entry of `params` and must return
/// a scalar node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "grad_check eps must be > 0, got {eps}"
        )));
    }
    let (mut g, vars, out) = eval(&f, params, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for p in 0..work.len() {
        for (i, &a) in analytic[p].iter().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (g, _, out) = eval(&f, &work, false)?;
            let plus = g.scalar(out);
            work[p].data_mut()[i] = orig - eps;
            let (g, _, out) = eval(&f, &work, false)?;
            let minus = g.scalar(out);
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_passes() {
        let params = [
            Tensor::vector(vec![2.0]).unwrap(),
            Tensor::vector(vec![3.0]).unwrap(),
        ];
        let r = grad_check(&params, DEFAULT_EPS, |g, v| g.mul(v[0], v[1])).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn constant_objective_reports_zero() {
        let params = [Tensor::vector(vec![2.0, -1.0]).unwrap()];
        let r = grad_check(&params, DEFAULT_EPS, |g, _| g.constant(&[1], vec![4.0])).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = [Tensor::vector(vec![1.0]).unwrap()];
        let r = grad_check(&params, DEFAULT_EPS, |g, v| {
            let big = g.scale(v[0], f64::INFINITY)?;
            g.sum(big)
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(grad_check(&params, 0.0, |g, v| g.sum(v[0])).is_err());
    }
}
