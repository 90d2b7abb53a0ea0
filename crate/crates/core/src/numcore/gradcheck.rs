use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Worst relative error per parameter tensor, by manifest name.
    pub per_param: Vec<(String, f64)>,
}

/// Compare the analytic gradient returned by `f` against `(f(p+ε) − f(p−ε)) / 2ε`
/// for every scalar in `params`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, DENOM_FLOOR)`. The floor keeps structurally zero
/// gradients (e.g. a key bias under softmax) from dividing roundoff by zero.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Tensor>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Argument(format!("eps {eps} outside (0, 1e-2]")));
    }
    let (f0, analytic) = f(params)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f = {f0}")));
    }
    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (i, name) in params.names().iter().enumerate() {
        let mut group = 0.0f64;
        for j in 0..params.get(i).len() {
            let orig = params.get(i).data()[j];
            probe.get_mut(i).data_mut()[j] = orig + eps;
            let (fp, _) = f(&probe)?;
            probe.get_mut(i).data_mut()[j] = orig - eps;
            let (fm, _) = f(&probe)?;
            probe.get_mut(i).data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Evaluation(format!(
                    "{name}[{j}]: f(p±ε) = {fp}, {fm}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            group = group.max((a - numeric).abs() / denom);
        }
        worst = worst.max(group);
        per_param.push((name.clone(), group));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Graph;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("p", Tensor::vector(vals.to_vec()));
        s
    }

    #[test]
    fn square_at_three() {
        let s = store(&[3.0]);
        let r = finite_diff_check(&s, 1e-4, |p| {
            let x = p.get(0).data()[0];
            Ok((x * x, vec![Tensor::vector(vec![2.0 * x])]))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let s = store(&[1.0, -2.0]);
        let r = finite_diff_check(&s, 1e-4, |_| Ok((5.0, vec![Tensor::zeros(&[2])]))).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let s = store(&[1.0]);
        let r = finite_diff_check(&s, 1e-4, |_| Ok((f64::NAN, vec![Tensor::zeros(&[1])])));
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn bad_eps_is_rejected() {
        let s = store(&[1.0]);
        assert!(finite_diff_check(&s, 0.5, |_| Ok((0.0, vec![Tensor::zeros(&[1])]))).is_err());
    }

    #[test]
    fn graph_square_sum_matches() {
        let s = store(&[0.5, -1.5, 2.0]);
        let r = finite_diff_check(&s, 1e-5, |p| {
            let mut g = Graph::new();
            let x = g.param(p, 0);
            let y = g.square(x);
            let out = g.sum(y);
            Ok((g.scalar(out), g.backward(out, p)?))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }
}
