//! Training objectives.

use crate::error::{Error, Result};
use crate::metrics::ssim_tensor;
use crate::tensor::Tensor;

/// `1 - mean SSIM`, differentiable in both arguments. Accepts `[.., h, w]`
/// batches; the map is averaged over every plane.
pub fn ssim_loss(reference: &Tensor, test: &Tensor) -> Result<Tensor> {
    Ok(ssim_tensor(reference, test)?.neg().add_scalar(1.0))
}

/// Binary cross-entropy with logits against a constant target, averaged.
pub fn bce_with_logits(logits: &Tensor, target_real: bool) -> Tensor {
    if target_real {
        logits.neg().softplus().mean()
    } else {
        logits.softplus().mean()
    }
}

/// Non-saturating GAN pair `(g_loss, d_loss)` from discriminator logits.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if !d_real.all_finite() || !d_fake.all_finite() {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let d_loss = bce_with_logits(d_real, true).add(&bce_with_logits(d_fake, false))?;
    let g_loss = bce_with_logits(d_fake, true);
    Ok((g_loss, d_loss))
}

pub fn combined_generator_loss(reference: &Tensor, recon: &Tensor, d_fake: &Tensor, lambda_adv: f64) -> Result<Tensor> {
    if !(lambda_adv >= 0.0) {
        return Err(Error::Config(format!("lambda_adv must be non-negative, got {lambda_adv}")));
    }
    let base = ssim_loss(reference, recon)?;
    if lambda_adv == 0.0 {
        return Ok(base);
    }
    base.add(&bce_with_logits(d_fake, true).mul_scalar(lambda_adv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::grad_check;

    fn image(h: usize, w: usize, rng: &mut Rng) -> Tensor {
        Tensor::new((0..h * w).map(|_| rng.uniform()).collect(), &[1, h, w]).unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn ssim_loss_range_and_zero() {
        let mut rng = Rng::new(1);
        let a = image(16, 16, &mut rng);
        assert_eq!(ssim_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        for _ in 0..10 {
            let b = image(16, 16, &mut rng);
            let l = ssim_loss(&a, &b).unwrap().item().unwrap();
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn ssim_loss_gradient() {
        let mut rng = Rng::new(2);
        let a = image(16, 16, &mut rng);
        let b = image(16, 16, &mut rng);
        let err = grad_check(|p| ssim_loss(&p[0], &p[1]), &[a, b], 1e-3, 512, &mut rng).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn adversarial_analytic_points() {
        let z = Tensor::zeros(&[3]);
        let (g, d) = adversarial_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.item().unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((g.item().unwrap() - ln2).abs() < 1e-15);
        let (_, d) = adversarial_losses(&Tensor::full(&[2], 800.0), &Tensor::full(&[2], -800.0)).unwrap();
        assert_eq!(d.item().unwrap(), 0.0);
        assert!(adversarial_losses(&Tensor::scalar(f64::NAN), &z).is_err());
    }

    #[test]
    fn adversarial_matches_direct_formula() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let r = rng.normal_vec(4, 3.0);
            let f = rng.normal_vec(4, 3.0);
            let (g, d) = adversarial_losses(&Tensor::new(r.clone(), &[4]).unwrap(), &Tensor::new(f.clone(), &[4]).unwrap()).unwrap();
            let d_ref = r.iter().map(|x| -sigmoid(*x).ln()).sum::<f64>() / 4.0
                + f.iter().map(|x| -(1.0 - sigmoid(*x)).ln()).sum::<f64>() / 4.0;
            let g_ref = f.iter().map(|x| -sigmoid(*x).ln()).sum::<f64>() / 4.0;
            assert!((d.item().unwrap() - d_ref).abs() < 1e-10);
            assert!((g.item().unwrap() - g_ref).abs() < 1e-10);
        }
    }

    #[test]
    fn adversarial_gradients() {
        let mut rng = Rng::new(4);
        let r = Tensor::new(rng.normal_vec(5, 2.0), &[5]).unwrap();
        let f = Tensor::new(rng.normal_vec(5, 2.0), &[5]).unwrap();
        let err = grad_check(
            |p| {
                let (g, d) = adversarial_losses(&p[0], &p[1])?;
                g.add(&d.mul_scalar(0.7))
            },
            &[r, f],
            1e-6,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn combined_loss_composition() {
        let mut rng = Rng::new(5);
        let a = image(12, 12, &mut rng);
        let b = image(12, 12, &mut rng);
        let logit = Tensor::new(vec![0.3], &[1]).unwrap();
        let s = ssim_loss(&a, &b).unwrap().item().unwrap();
        assert_eq!(combined_generator_loss(&a, &b, &logit, 0.0).unwrap().item().unwrap(), s);
        assert_eq!(combined_generator_loss(&a, &a, &logit, 0.0).unwrap().item().unwrap(), 0.0);
        let (g, _) = adversarial_losses(&logit, &logit).unwrap();
        let total = combined_generator_loss(&a, &b, &logit, 0.25).unwrap().item().unwrap();
        assert!((total - (s + 0.25 * g.item().unwrap())).abs() < 1e-12);
        assert!(combined_generator_loss(&a, &b, &logit, -1.0).is_err());
    }
}
