//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// Parameter that produced `max_rel_error`.
    pub worst_param: String,
    pub checked_params: usize,
    pub checked_elements: usize,
}

/// Compare analytic gradients of `loss` against central differences.
///
/// For every trainable parameter the relative error is
/// `‖analytic − central‖ / (‖analytic‖ + ‖central‖ + 1e-12)` over its checked
/// elements; the report carries the maximum. `max_elems` bounds how many
/// elements per parameter are perturbed (evenly strided); `None` checks all.
pub fn finite_difference_check<F>(params: &ParameterSet, eps: f64, max_elems: Option<usize>, loss: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new(ps);
        let l = loss(&mut g)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        if !g.scalar(l).is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        g.backward(l)?
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked_params: 0,
        checked_elements: 0,
    };
    for id in 0..params.len() {
        let p = params.entry(id);
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let zeros = vec![0.0; n];
        let a = analytic.get(id).unwrap_or(&zeros);
        let stride = match max_elems {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut cn2 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = p.value.data()[i];
            work.entry_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.entry_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.entry_mut(id).value.data_mut()[i] = orig;
            let central = (up - down) / (2.0 * eps);
            diff2 += (a[i] - central).powi(2);
            an2 += a[i] * a[i];
            cn2 += central * central;
            report.checked_elements += 1;
        }
        let rel = diff2.sqrt() / (an2.sqrt() + cn2.sqrt() + 1e-12);
        report.checked_params += 1;
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel;
            report.worst_param = p.name.clone();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let grad = {
            let mut g = Graph::new(&ps);
            let x = g.param("x").unwrap();
            let y = g.mul(x, x).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap()
        };
        assert!((grad.get(0).unwrap()[0] - 6.0).abs() < 1e-12);
        let r = finite_difference_check(&ps, 1e-5, None, |g| {
            let x = g.param("x")?;
            let y = g.mul(x, x)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn bce_at_zero_logit() {
        let mut ps = ParameterSet::new();
        ps.insert("z", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let mut g = Graph::new(&ps);
        let z = g.param("z").unwrap();
        let l = g.bce_with_logits(z, 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.get(0).unwrap()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let ps = ParameterSet::new();
        let r = finite_difference_check(&ps, 1e-2, None, |g| {
            let x = g.input_data(1, 1, vec![1.0])?;
            g.sum(x)
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::matrix(1, 1, vec![1e200]).unwrap()).unwrap();
        let r = finite_difference_check(&ps, 1e-5, None, |g| {
            let x = g.param("x")?;
            let y = g.mul(x, x)?;
            g.sum(y)
        });
        assert!(r.is_err());
    }
}
