//! Gradient verification against central finite differences.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar program against central
/// finite differences and return the worst relative error over all input
/// coordinates. Relative error is |a - n| / max(1, |a| + |n|).
///
/// `f` must be deterministic; `eps` must lie in [1e-6, 1e-3].
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    if inputs.iter().any(|t| !t.requires_grad()) {
        return Err(Error::Usage(
            "grad_check inputs must all have requires_grad".into(),
        ));
    }

    let out = f(inputs)?;
    if out.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check requires a scalar-valued program, got output shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |probe: usize, coord: usize, delta: f64| -> Result<f64> {
        let shifted: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut vals = t.values().to_vec();
                if i == probe {
                    vals[coord] += delta;
                }
                Tensor::param(t.shape(), vals)
            })
            .collect::<Result<_>>()?;
        f(&shifted)?.item()
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let plus = eval(i, j, eps)?;
            let minus = eval(i, j, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batch_norm, conv2d, BnMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_exact_ones() {
        let x = Tensor::param(&[4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let err = grad_check(|ins| ins[0].sum_all(), &[x.clone()], 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::param(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|ins| ins[0].sum_all(), &[x.clone()], 1e-7).is_err());
        assert!(grad_check(|ins| ins[0].sum_all(), &[x], 1e-2).is_err());
    }

    #[test]
    fn non_scalar_program_rejected() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|ins| Ok(ins[0].scale(2.0)), &[x], 1e-5);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_chain_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = Tensor::randn(&[6], 1.0, &mut rng);
            let x = Tensor::param(&[6], x.values().to_vec()).unwrap();
            let err = grad_check(
                |ins| ins[0].tanh().sigmoid().mul(&ins[0].sigmoid())?.sum_all(),
                &[x],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn conv_bn_relu_stack_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let k0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(&[3], 0.5, &mut rng);
        let g0 = Tensor::randn(&[3], 0.3, &mut rng);
        let be0 = Tensor::randn(&[3], 0.3, &mut rng);
        let inputs = [
            Tensor::param(&[2, 5, 5], x0.values().to_vec()).unwrap(),
            Tensor::param(&[3, 2, 3, 3], k0.values().to_vec()).unwrap(),
            Tensor::param(&[3], b0.values().to_vec()).unwrap(),
            Tensor::param(&[3], g0.values().to_vec()).unwrap(),
            Tensor::param(&[3], be0.values().to_vec()).unwrap(),
        ];
        let err = grad_check(
            |ins| {
                let y = conv2d(&ins[0], &ins[1], Some(&ins[2]), 1, 1)?;
                let mut running = None;
                let y = batch_norm(&y, &ins[3], &ins[4], &mut running, BnMode::Train, 1e-5, 0.1)?;
                y.relu().mul(&y)?.mean_all()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
