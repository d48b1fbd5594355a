use std::f64::consts::LN_2;

use vitrecon::data::{synthetic_image, Dataset};
use vitrecon::layers::ParametersExt;
use vitrecon::losses::adversarial_losses;
use vitrecon::model::{DiscriminatorModel, ModelConfig};
use vitrecon::trainer::{adam_step, clip_global_norm, train, AdamConfig, AdamState, TrainConfig};
use vitrecon::{Rng, Tensor};

fn images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| synthetic_image(size, size, &mut rng)).collect()
}

#[test]
fn overfit_loss_falls_window_by_window() {
    let data = Dataset {
        images: images(8, 32, 1).into_iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect(),
        warnings: vec![],
    };
    let model = ModelConfig { image_h: 32, image_w: 32, ..Default::default() };
    let cfg = TrainConfig { epochs: 300, batch_size: 8, ..Default::default() };
    let log = train(&model, &cfg, &data, &[]).unwrap().log;
    assert_eq!(log.step_losses.len(), 300);
    let windows: Vec<f64> = log.step_losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "window means {windows:?}");
    }
}

#[test]
fn discriminator_on_identical_inputs_stays_at_chance() {
    let model = ModelConfig {
        image_h: 16,
        image_w: 16,
        patch: 4,
        d_model: 16,
        heads: 2,
        depth: 2,
        disc_patch: 4,
        disc_stride: 2,
        use_discriminator: true,
        ..Default::default()
    };
    let mut disc = DiscriminatorModel::new(&model).unwrap();
    let batch_imgs = images(4, 16, 2);
    let batch = Tensor::new(batch_imgs.iter().flat_map(|t| t.to_vec()).collect(), &[4, 1, 16, 16]).unwrap();
    let adam = AdamConfig { lr: 1e-3, ..Default::default() };
    let mut state = AdamState::new(&disc.params());
    let mut losses = Vec::new();
    for _ in 0..60 {
        // generator is the identity on clean data: fake == real
        let logits = disc.forward(&batch).unwrap();
        let (_, d_loss) = adversarial_losses(&logits, &logits).unwrap();
        losses.push(d_loss.item().unwrap());
        d_loss.backward().unwrap();
        let params = disc.params();
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();
        clip_global_norm(&mut grads, 1.0);
        disc = disc.with_params(&adam_step(&params, &grads, &mut state, &adam).unwrap()).unwrap();
    }
    for l in &losses[20..] {
        assert!(*l >= 2.0 * LN_2 - 1e-12 && *l < 2.0 * LN_2 + 1e-3, "{l}");
    }
}
