use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Compares analytic gradients of a scalar function against a five-point
/// central-difference stencil (fourth-order accurate in `step`).
///
/// `samples` scalar coordinates are drawn uniformly over all parameter entries.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, samples: usize, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::parameter(p.to_vec(), p.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if !loss.all_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let total: usize = params.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let eval_at = |which: usize, coord: usize, value: f64| -> Result<f64> {
        let mut shifted: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
        let mut data = params[which].to_vec();
        data[coord] = value;
        shifted[which] = Tensor::new(data, params[which].shape())?;
        let v = f(&shifted)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= params[which].numel() {
            flat -= params[which].numel();
            which += 1;
        }
        let x0 = params[which].data()[flat];
        let f1 = eval_at(which, flat, x0 + step)? - eval_at(which, flat, x0 - step)?;
        let f2 = eval_at(which, flat, x0 + 2.0 * step)? - eval_at(which, flat, x0 - 2.0 * step)?;
        let numeric = (8.0 * f1 - f2) / (12.0 * step);
        let a = analytic[which][flat];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
