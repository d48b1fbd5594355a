//! Optimization loops, evaluation and checkpointing.

mod ablation;
mod adam;

pub use ablation::{ablation_csv, dedup_switches, run_ablation, AblationRow, Switches};
pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{corrupt_test_split, train_corruption_seed, CorruptionKind, CorruptionSpec, Dataset, Dihedral, ImageSample, DEFAULT_NOISE_VARIANCE};
use crate::error::{Error, Result};
use crate::layers::{Parameters, ParametersExt};
use crate::losses::{adversarial_losses, combined_generator_loss, ssim_loss};
use crate::metrics::MetricsRecord;
use crate::model::{DiscriminatorModel, GeneratorModel, ModelConfig};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5AFF;
const AUGMENT_STREAM: u64 = 0xA06E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Inpaint,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "inpaint" => Ok(Task::Inpaint),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected denoise or inpaint)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub noise_variance: f64,
    /// Rows blanked per image for inpainting; `None` means `ceil(h / 8)`.
    pub mask_rows: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_adv: f64,
    /// Discriminator learning rate; `None` reuses `lr`.
    pub disc_lr: Option<f64>,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub augment: bool,
    /// Record per-epoch wall time in the log. Off by default so logs are reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            mask_rows: None,
            epochs: 10,
            batch_size: 8,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_adv: 0.05,
            disc_lr: None,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 1,
            checkpoint_dir: None,
            augment: false,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Checks everything except `epochs`, which may be zero for a no-op run.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || self.disc_lr.is_some_and(|l| !(l > 0.0)) {
            return fail("learning rates must be positive".into());
        }
        if !(self.lambda_adv >= 0.0) {
            return fail(format!("lambda_adv must be non-negative, got {}", self.lambda_adv));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.noise_variance > 0.0) {
            return fail(format!("noise_variance must be positive, got {}", self.noise_variance));
        }
        Ok(())
    }

    pub fn corruption(&self, image_h: usize) -> CorruptionKind {
        match self.task {
            Task::Denoise => CorruptionKind::GaussianNoise {
                variance: self.noise_variance,
            },
            Task::Inpaint => CorruptionKind::RowMask {
                n_rows: self.mask_rows.unwrap_or(image_h.div_ceil(8)),
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.disc_lr.unwrap_or(self.lr),
            ..self.adam()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub gen_loss: f64,
    pub disc_loss: Option<f64>,
    /// Fraction of real and fake images the discriminator classified correctly.
    pub disc_accuracy: Option<f64>,
    pub metrics: Option<MetricsRecord>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Generator loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub disc_step_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    gen_loss: f64,
    disc_loss: Option<f64>,
    psnr: Option<f64>,
    ssim: Option<f64>,
    nmse: Option<f64>,
    seconds: Option<f64>,
}

impl TrainLog {
    /// `epoch,gen_loss,disc_loss,psnr,ssim,nmse,seconds`; absent values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(["epoch", "gen_loss", "disc_loss", "psnr", "ssim", "nmse", "seconds"])
                .map_err(csv_err)?;
        }
        for r in &self.records {
            w.serialize(CsvRow {
                epoch: r.epoch,
                gen_loss: r.gen_loss,
                disc_loss: r.disc_loss,
                psnr: r.metrics.map(|m| m.psnr),
                ssim: r.metrics.map(|m| m.ssim),
                nmse: r.metrics.map(|m| m.nmse),
                seconds: r.seconds,
            })
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Anything that maps a corrupted image to a reconstruction.
pub trait Reconstructor {
    fn reconstruct(&self, corrupted: &Tensor) -> Result<Tensor>;
}

impl Reconstructor for GeneratorModel {
    fn reconstruct(&self, corrupted: &Tensor) -> Result<Tensor> {
        self.forward(corrupted)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> Reconstructor for F {
    fn reconstruct(&self, corrupted: &Tensor) -> Result<Tensor> {
        self(corrupted)
    }
}

/// Mean metrics of `model(corrupted)` against `clean` over all samples.
pub fn evaluate<R: Reconstructor + ?Sized>(model: &R, samples: &[ImageSample]) -> Result<MetricsRecord> {
    let per_image = samples
        .iter()
        .map(|s| MetricsRecord::of_pair(&s.clean, &model.reconstruct(&s.corrupted)?))
        .collect::<Result<Vec<_>>>()?;
    MetricsRecord::mean(&per_image)
}

/// [`evaluate`] on a constant copy of the generator, so no graph is built.
pub fn evaluate_generator(gen: &GeneratorModel, samples: &[ImageSample]) -> Result<MetricsRecord> {
    evaluate(&gen.frozen(), samples)
}

/// Corrupts a test split the way training would for this config.
pub fn eval_samples(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<ImageSample>> {
    check_shapes(dataset, model)?;
    corrupt_test_split(dataset, cfg.corruption(model.image_h), cfg.seed)
}

fn check_shapes(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    let expected = model.image_shape();
    for (id, img) in &dataset.images {
        if img.shape() != expected {
            return Err(Error::Config(format!(
                "image {id} has shape {:?} but the model expects {:?}",
                img.shape(),
                expected
            )));
        }
    }
    Ok(())
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    Tensor::new(images.iter().flat_map(|t| t.data().iter().copied()).collect(), &shape)
}

fn optimizer_step<M: Parameters + Clone>(model: &M, state: &mut AdamState, adam: &AdamConfig, clip: f64) -> Result<M> {
    let params = model.params();
    let mut grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    clip_global_norm(&mut grads, clip);
    model.with_params(&adam_step(&params, &grads, state, adam)?)
}

fn at_step(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

struct Adversary<'a> {
    disc: &'a mut DiscriminatorModel,
    state: AdamState,
}

fn run(
    gen: &mut GeneratorModel,
    mut adversary: Option<Adversary<'_>>,
    train: &Dataset,
    eval: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    cfg.validate()?;
    check_shapes(train, &gen.config)?;
    let kind = cfg.corruption(gen.config.image_h);
    kind.validate(gen.config.image_h)?;
    let mut gen_state = AdamState::new(&gen.params());
    let (gen_adam, disc_adam) = (cfg.adam(), cfg.disc_adam());
    let indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle = Rng::new(derive_seed(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let (mut gen_sum, mut disc_sum, mut n_batches) = (0.0, 0.0, 0usize);
        let (mut correct, mut judged) = (0usize, 0usize);

        for (b, batch) in crate::data::batch_iter(&indices, cfg.batch_size, &mut shuffle)?.enumerate() {
            let mut cleans = Vec::with_capacity(batch.len());
            let mut corrupted = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut clean = train.images[i].1.clone();
                if cfg.augment {
                    let mut rng = Rng::new(derive_seed(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]));
                    clean = Dihedral::sample(&mut rng).apply(&clean)?;
                }
                let (_, noisy) = CorruptionSpec::draw(kind, train_corruption_seed(cfg.seed, epoch, i), &clean)?;
                cleans.push(clean);
                corrupted.push(noisy);
            }
            let clean = stack(&cleans)?;
            let recon = gen.forward(&stack(&corrupted)?).map_err(|e| at_step(e, epoch, b))?;

            let gen_loss = match adversary.as_mut() {
                None => ssim_loss(&clean, &recon)?,
                Some(adv) => {
                    let real = adv.disc.forward(&clean).map_err(|e| at_step(e, epoch, b))?;
                    let fake = adv.disc.forward(&recon.detach()).map_err(|e| at_step(e, epoch, b))?;
                    let (_, d_loss) = adversarial_losses(&real, &fake).map_err(|e| at_step(e, epoch, b))?;
                    let d = d_loss.item()?;
                    if !d.is_finite() {
                        return Err(Error::NonFinite(format!("discriminator loss (epoch {epoch}, batch {b})")));
                    }
                    correct += real.data().iter().filter(|&&l| l > 0.0).count();
                    correct += fake.data().iter().filter(|&&l| l < 0.0).count();
                    judged += real.numel() + fake.numel();
                    d_loss.backward()?;
                    *adv.disc = optimizer_step(&*adv.disc, &mut adv.state, &disc_adam, cfg.grad_clip)?;
                    disc_sum += d;
                    log.disc_step_losses.push(d);

                    let judge = adv.disc.frozen();
                    let d_fake = judge.forward(&recon).map_err(|e| at_step(e, epoch, b))?;
                    combined_generator_loss(&clean, &recon, &d_fake, cfg.lambda_adv)?
                }
            };
            let g = gen_loss.item()?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("generator loss (epoch {epoch}, batch {b})")));
            }
            gen_loss.backward()?;
            *gen = optimizer_step(&*gen, &mut gen_state, &gen_adam, cfg.grad_clip)?;
            gen_sum += g;
            n_batches += 1;
            log.step_losses.push(g);
        }

        let disc_accuracy = (judged > 0).then(|| correct as f64 / judged as f64);
        if disc_accuracy == Some(1.0) {
            let msg = format!("discriminator separated every real and fake image in epoch {epoch}");
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
        let due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let metrics = if due && !eval.is_empty() {
            Some(evaluate_generator(gen, eval)?)
        } else {
            None
        };
        if let (Some(dir), true) = (&cfg.checkpoint_dir, epoch % cfg.eval_every == 0) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            gen.save(&dir.join(format!("generator-epoch{epoch:04}.ckpt")))?;
            if let Some(adv) = &adversary {
                adv.disc.save(&dir.join(format!("discriminator-epoch{epoch:04}.ckpt")))?;
            }
        }
        let record = EpochRecord {
            epoch,
            gen_loss: gen_sum / n_batches as f64,
            disc_loss: adversary.as_ref().map(|_| disc_sum / n_batches as f64),
            disc_accuracy,
            metrics,
            seconds: cfg.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: gen_loss {:.5}{}",
            record.gen_loss,
            record.disc_loss.map(|d| format!(", disc_loss {d:.5}")).unwrap_or_default()
        );
        log.records.push(record);
    }
    Ok(log)
}

/// SSIM-loss training of the generator alone.
pub fn train_plain(gen: &mut GeneratorModel, train: &Dataset, eval: &[ImageSample], cfg: &TrainConfig) -> Result<TrainLog> {
    run(gen, None, train, eval, cfg)
}

/// Alternating discriminator / generator updates, one each per batch.
pub fn train_adversarial(
    gen: &mut GeneratorModel,
    disc: &mut DiscriminatorModel,
    train: &Dataset,
    eval: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if !(cfg.lambda_adv > 0.0) {
        return Err(Error::Config("adversarial training needs lambda_adv > 0".into()));
    }
    let state = AdamState::new(&disc.params());
    run(gen, Some(Adversary { disc, state }), train, eval, cfg)
}

/// Trained models and their log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: GeneratorModel,
    pub discriminator: Option<DiscriminatorModel>,
    pub log: TrainLog,
}

/// Builds fresh models from `model` and trains them, adversarially when the
/// discriminator switch is on.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &Dataset, eval: &[ImageSample]) -> Result<TrainOutcome> {
    let mut generator = GeneratorModel::new(model)?;
    if model.use_discriminator {
        let mut disc = DiscriminatorModel::new(model)?;
        let log = train_adversarial(&mut generator, &mut disc, data, eval, cfg)?;
        Ok(TrainOutcome {
            generator,
            discriminator: Some(disc),
            log,
        })
    } else {
        let log = train_plain(&mut generator, data, eval, cfg)?;
        Ok(TrainOutcome {
            generator,
            discriminator: None,
            log,
        })
    }
}
