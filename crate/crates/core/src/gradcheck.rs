//! Central finite differences, the reference every analytic gradient is
//! checked against.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::{Init, Scalar, Tensor};

/// `(f(t + eps·eᵢ) − f(t − eps·eᵢ)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, t: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = t.clone();
    probe.clear_grad();
    let mut g = Vec::with_capacity(t.numel());
    for i in 0..t.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.push((up - down) / (eps + eps));
    }
    Tensor::new(t.shape(), g).expect("shape taken from an existing tensor")
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over paired elements. The floor
/// keeps vanishing gradients from being judged on round-off alone.
pub fn max_rel_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: T) -> T {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}

/// Compares reverse-mode gradients of `Σ build(inputs) ⊙ R` with central
/// differences, `R` being a fixed normal weighting drawn from `seed`.
/// Every input is a differentiable leaf. Returns the largest relative error
/// per input.
pub fn check_graph<T: Scalar>(
    build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    eps: T,
    floor: T,
    seed: u64,
) -> Result<Vec<T>> {
    let mut weighting: Option<Tensor<T>> = None;
    let mut run = |xs: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let r = match &weighting {
            Some(r) => r.clone(),
            None => {
                let r = Tensor::create(g.shape(y), Init::Gaussian { mean: 0.0, std: 1.0, seed })?;
                weighting = Some(r.clone());
                r
            }
        };
        let r = g.input(r);
        let yr = g.mul(y, r)?;
        let loss = g.sum_all(yr)?;
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = run(inputs)?;
    let grads = g.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map_or_else(|| vec![T::zero(); inputs[i].numel()], <[T]>::to_vec);
        let mut failure = None;
        let numeric = finite_diff_grad(
            |t| {
                let mut xs = inputs.to_vec();
                xs[i] = t.clone();
                match run(&xs) {
                    Ok((g, _, loss)) => g.value(loss).data()[0],
                    Err(e) => {
                        failure.get_or_insert(e);
                        T::nan()
                    }
                }
            },
            &inputs[i],
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(max_rel_error(&analytic, numeric.data(), floor));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let t = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &t, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn sum_and_constant() {
        let t = Tensor::<f64>::new(&[3], vec![0.3, -7.0, 1e3]).unwrap();
        let g = finite_diff_grad(|x| x.sum_all(), &t, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9 * 1e3));
        let g = finite_diff_grad(|_| 4.2f64, &t, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn graph_check_of_product() {
        let a = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(&[3], vec![1.5, 0.25, -3.0]).unwrap();
        let errs = check_graph(|g, v| g.mul(v[0], v[1]), &[a, b], 1e-5, 1e-4, 3).unwrap();
        assert_eq!(errs.len(), 2);
        assert!(errs.iter().all(|&e| e < 1e-8), "{errs:?}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(max_rel_error(&[1.0, 0.0], &[1.0, 1e-9], 1e-4), 1e-5);
        assert!((max_rel_error::<f64>(&[2.0], &[1.0], 1e-4) - 0.5).abs() < 1e-15);
    }
}
