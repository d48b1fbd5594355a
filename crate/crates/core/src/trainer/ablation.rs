use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{csv_err, evaluate_generator, train, TrainConfig};
use crate::data::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::ModelConfig;

/// One combination of the four enhancement switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Switches {
    pub lsa: bool,
    pub spt: bool,
    pub rope: bool,
    pub disc: bool,
}

impl Switches {
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_lsa: self.lsa,
            use_spt: self.spt,
            use_rope: self.rope,
            use_discriminator: self.disc,
            ..base.clone()
        }
    }
}

/// `vanilla`, or `+`-joined names from `lsa`, `spt`, `rope`, `disc` and `all`
/// (the three attention/tokenizer switches).
impl FromStr for Switches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Switches::default();
        let s = s.trim();
        if s == "vanilla" {
            return Ok(out);
        }
        for part in s.split('+').map(str::trim) {
            match part {
                "lsa" => out.lsa = true,
                "spt" => out.spt = true,
                "rope" => out.rope = true,
                "disc" => out.disc = true,
                "all" => {
                    out.lsa = true;
                    out.spt = true;
                    out.rope = true;
                }
                _ => return Err(Error::Config(format!("unknown switch {part:?} in combination {s:?}"))),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Switches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.lsa, "lsa"), (self.spt, "spt"), (self.rope, "rope"), (self.disc, "disc")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("vanilla")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

/// Drops repeated combinations, keeping first occurrences, and describes each drop.
pub fn dedup_switches(list: &[Switches]) -> (Vec<Switches>, Vec<String>) {
    let mut kept: Vec<Switches> = Vec::new();
    let mut warnings = Vec::new();
    for s in list {
        if kept.contains(s) {
            warnings.push(format!("duplicate combination {s} ignored"));
        } else {
            kept.push(*s);
        }
    }
    (kept, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub lsa: bool,
    pub spt: bool,
    pub rope: bool,
    pub disc: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl AblationRow {
    pub fn new(s: Switches, m: &MetricsRecord) -> Self {
        Self {
            lsa: s.lsa,
            spt: s.spt,
            rope: s.rope,
            disc: s.disc,
            psnr: m.psnr,
            ssim: m.ssim,
            nmse: m.nmse,
        }
    }
}

/// Trains and evaluates each combination in turn with the same seeds.
pub fn run_ablation(
    base: &ModelConfig,
    cfg: &TrainConfig,
    combos: &[Switches],
    train_data: &Dataset,
    test: &[ImageSample],
) -> Result<(Vec<AblationRow>, Vec<String>)> {
    let (combos, mut warnings) = dedup_switches(combos);
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut rows = Vec::with_capacity(combos.len());
    for s in combos {
        log::info!("ablation: training {s}");
        let outcome = train(&s.apply(base), cfg, train_data, test)?;
        warnings.extend(outcome.log.warnings.iter().map(|w| format!("{s}: {w}")));
        rows.push(AblationRow::new(s, &evaluate_generator(&outcome.generator, test)?));
    }
    Ok((rows, warnings))
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["lsa", "spt", "rope", "disc", "psnr", "ssim", "nmse"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
