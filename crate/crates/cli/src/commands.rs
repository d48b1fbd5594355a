//! Command implementations. Results go to the supplied writer (stdout in the
//! binary); diagnostics go through `log` to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vitrecon::data::{load_dataset, load_image, save_image, test_corruption_seed, write_synthetic_dataset, CorruptionSpec, Dataset, Split};
use vitrecon::metrics::MetricsRecord;
use vitrecon::model::GeneratorModel;
use vitrecon::selfcheck::{self, Hooks};
use vitrecon::trainer::{ablation_csv, eval_samples, evaluate_generator, run_ablation, train};
use vitrecon::Tensor;

use crate::config::RunConfig;

/// Blank columns between triptych panels.
pub const GUTTER: usize = 4;

fn load_split(cfg: &RunConfig, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let root = cfg.dataset_root()?;
    if !root.is_dir() {
        bail!("dataset directory {} does not exist", root.display());
    }
    let ds = load_dataset(root, split, limit)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Trains per the switches, writes `train_log.csv`, checkpoints and the
/// resolved config under `out`, then prints the final test metrics.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricsRecord> {
    cfg.validate()?;
    let model = cfg.model_config();
    let tcfg = cfg.train_config();
    let train_set = load_split(cfg, Split::Train, cfg.limit_train)?;
    let test_set = load_split(cfg, Split::Test, cfg.limit_test)?;
    let test = eval_samples(&test_set, &model, &tcfg)?;
    eval_samples(&train_set, &model, &tcfg)?;

    create_out(&cfg.out)?;
    std::fs::write(cfg.out.join("run.toml"), toml::to_string(cfg)?)?;
    log::info!(
        "training on {} images, evaluating on {} ({} epochs)",
        train_set.len(),
        test.len(),
        tcfg.epochs
    );
    let outcome = train(&model, &tcfg, &train_set, &test)?;
    outcome.log.write_csv(&cfg.out.join("train_log.csv"))?;
    outcome.generator.save(&cfg.out.join("generator.ckpt"))?;
    if let Some(d) = &outcome.discriminator {
        d.save(&cfg.out.join("discriminator.ckpt"))?;
    }
    let metrics = evaluate_generator(&outcome.generator, &test)?;
    print_json(out, &metrics)?;
    Ok(metrics)
}

fn load_generator(path: &Path, cfg: &RunConfig) -> Result<GeneratorModel> {
    let gen = GeneratorModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (ck, want) = (gen.config.image_shape(), [cfg.channels, cfg.image_h, cfg.image_w]);
    if ck != want {
        bail!("checkpoint expects images of shape {ck:?} but the config specifies {want:?}");
    }
    Ok(gen)
}

/// Evaluates a generator checkpoint on the test split and prints one JSON record.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<MetricsRecord> {
    let gen = load_generator(checkpoint, cfg)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let test_set = load_split(cfg, Split::Test, cfg.limit_test)?;
    let samples = eval_samples(&test_set, &gen.config, &tcfg)?;
    let metrics = evaluate_generator(&gen, &samples)?;
    print_json(out, &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Serialize)]
pub struct ReconstructOutput {
    pub corrupted: PathBuf,
    pub reconstruction: PathBuf,
    pub original: PathBuf,
    pub triptych: PathBuf,
    pub metrics: MetricsRecord,
}

/// Places `[1, h, w]` panels left to right with white gutters.
pub fn triptych(panels: &[&Tensor], gutter: usize) -> Result<Tensor> {
    let [1, h, w] = *panels[0].shape() else {
        bail!("triptych panels must be [1, h, w]");
    };
    let width = panels.len() * w + (panels.len() - 1) * gutter;
    let mut px = vec![1.0; h * width];
    for (k, p) in panels.iter().enumerate() {
        if p.shape() != [1, h, w] {
            bail!("triptych panel shapes differ: {:?} vs {:?}", p.shape(), [1, h, w]);
        }
        let x0 = k * (w + gutter);
        for y in 0..h {
            px[y * width + x0..y * width + x0 + w].copy_from_slice(&p.data()[y * w..(y + 1) * w]);
        }
    }
    Ok(Tensor::new(px, &[1, h, width])?)
}

/// Corrupts one image, reconstructs it and writes the three panels plus the
/// composed triptych (corrupted, reconstruction, original).
pub fn reconstruct_cmd(cfg: &RunConfig, checkpoint: &Path, image: &Path, out: &mut dyn Write) -> Result<ReconstructOutput> {
    let gen = load_generator(checkpoint, cfg)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let clean = load_image(image)?;
    let want = gen.config.image_shape();
    if clean.shape() != want {
        bail!("image {} has shape {:?} but the model expects {:?}", image.display(), clean.shape(), want);
    }
    let kind = tcfg.corruption(gen.config.image_h);
    let (_, corrupted) = CorruptionSpec::draw(kind, test_corruption_seed(cfg.seed, 0), &clean)?;
    let recon = evaluate_input(&gen, &corrupted)?;

    create_out(&cfg.out)?;
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let path = |suffix: &str| cfg.out.join(format!("{stem}_{suffix}.png"));
    let result = ReconstructOutput {
        corrupted: path("corrupted"),
        reconstruction: path("reconstruction"),
        original: path("original"),
        triptych: path("triptych"),
        metrics: MetricsRecord::of_pair(&clean, &recon)?,
    };
    save_image(&corrupted, &result.corrupted)?;
    save_image(&recon, &result.reconstruction)?;
    save_image(&clean, &result.original)?;
    save_image(&triptych(&[&corrupted, &recon, &clean], GUTTER)?, &result.triptych)?;
    print_json(out, &result)?;
    Ok(result)
}

fn evaluate_input(gen: &GeneratorModel, corrupted: &Tensor) -> Result<Tensor> {
    use vitrecon::layers::ParametersExt;
    Ok(gen.frozen().forward(corrupted)?)
}

/// Trains and evaluates every configured switch combination; writes and prints the CSV.
pub fn ablate_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<String> {
    cfg.validate()?;
    let combos = cfg.switch_list()?;
    let model = cfg.model_config();
    let mut tcfg = cfg.train_config();
    tcfg.checkpoint_dir = None;
    let train_set = load_split(cfg, Split::Train, cfg.limit_train)?;
    let test_set = load_split(cfg, Split::Test, cfg.limit_test)?;
    let test = eval_samples(&test_set, &model, &tcfg)?;
    eval_samples(&train_set, &model, &tcfg)?;
    for s in &combos {
        s.apply(&model).validate()?;
    }

    create_out(&cfg.out)?;
    let (rows, warnings) = run_ablation(&model, &tcfg, &combos, &train_set, &test)?;
    for w in warnings {
        log::warn!("{w}");
    }
    let csv = ablation_csv(&rows)?;
    std::fs::write(cfg.out.join("ablation.csv"), &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(csv)
}

/// Runs the invariant suite; returns whether every check passed.
pub fn selfcheck_cmd(hooks: &Hooks, out: &mut dyn Write) -> Result<bool> {
    let results = selfcheck::run(hooks);
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} {} ({}; {:.2}s)", r.name, r.detail, r.seconds)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        log::error!("failed checks: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

/// Writes a procedural dataset in the layout `train` and `eval` expect.
pub fn synth_data_cmd(root: &Path, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<()> {
    write_synthetic_dataset(root, n_train, n_test, size, size, seed)?;
    log::info!("wrote {n_train} train and {n_test} test images to {}", root.display());
    Ok(())
}
