use super::array::NdArray;
use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};

/// Central-difference check of the gradient of a scalar function with
/// respect to every element of every input.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck_many<F>(f: F, inputs: &[NdArray], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    Ok(run(f, inputs, eps, false)?.expect("branch switches are ignored"))
}

/// [`gradcheck_many`] for piecewise-smooth functions. Returns `None` when
/// some perturbation of `±eps` moves a ReLU, `abs`, clamp or max-pool onto
/// another branch, since central differences then straddle a kink and say
/// nothing about the derivative at the instance.
pub fn gradcheck_piecewise<F>(f: F, inputs: &[NdArray], eps: f64) -> Result<Option<f64>>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    run(f, inputs, eps, true)
}

/// `None` as soon as a perturbation switches branch, when `piecewise`.
fn run<F>(f: F, inputs: &[NdArray], eps: f64, piecewise: bool) -> Result<Option<f64>>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-3]")));
    }
    let (analytic, base) = {
        let g = Graph::new();
        let vars: Vec<Tensor<'_>> = inputs.iter().map(|a| g.variable(a.clone())).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| NdArray::zeros(&v.shape())))
            .collect::<Vec<_>>();
        (grads, g.branch_signature())
    };
    let eval = |perturbed: &[NdArray]| -> Result<Option<f64>> {
        let g = Graph::new();
        let consts: Vec<Tensor<'_>> = perturbed.iter().map(|a| g.constant(a.clone())).collect();
        let y = f(&g, &consts)?.item();
        Ok((!piecewise || g.branch_signature() == base).then_some(y))
    };
    let mut worst = 0.0f64;
    let mut work: Vec<NdArray> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                return Ok(None);
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::GradCheck(format!(
                    "NaN gradient at input {which} element {i} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(Some(worst))
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &NdArray, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Result<Tensor<'g>>,
{
    gradcheck_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn sum_is_exact() {
        let x = NdArray::from_vec(&[3, 4], sample(12, 1)).unwrap();
        let err = gradcheck(|_, x| Ok(x.sum_all()), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = NdArray::from_vec(&[10], sample(10, 2)).unwrap();
        let err = gradcheck(|_, x| Ok(x.sigmoid().sum_all()), &x, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kink_straddle_is_detected() {
        let x = NdArray::from_vec(&[2], vec![0.5, 1e-5]).unwrap();
        let r = gradcheck_piecewise(|_, xs| Ok(xs[0].relu().sum_all()), std::slice::from_ref(&x), 1e-4).unwrap();
        assert_eq!(r, None);
        let x = NdArray::from_vec(&[2], vec![0.5, -0.3]).unwrap();
        let r = gradcheck_piecewise(|_, xs| Ok(xs[0].relu().sum_all()), std::slice::from_ref(&x), 1e-4).unwrap();
        assert!(r.unwrap() < 1e-8);
    }

    #[test]
    fn eps_range_enforced() {
        let x = NdArray::ones(&[2]);
        assert!(gradcheck(|_, x| Ok(x.sum_all()), &x, 1e-2).is_err());
    }

    #[test]
    fn nan_is_reported() {
        let x = NdArray::from_vec(&[2], vec![-1.0, 1.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let nan = g.constant(NdArray::full(&[2], f64::NAN));
                Ok(x.mul(nan)?.sum_all())
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }
}
