use anyhow::{Context, Result};
use clap::Args;
use imc_core::codes::Encoding;
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::{AcamUnit, Config, NoiseSpec, UnitImage};
use imc_core::naf::{finetune_unit, function_mse};
use imc_core::rng::{self, stream};
use serde_json::json;

use crate::output::Out;

#[derive(Debug, Args)]
pub struct NafArgs {
    #[arg(long = "fn", value_name = "NAME")]
    pub func: String,
    /// TOML noise spec replacing the config's `[noise]` table.
    #[arg(long, value_name = "FILE")]
    pub noise: Option<std::path::PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Device seeds for evaluation, disjoint from the training draws.
pub fn eval_devices(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|d| rng::key(seed, &[stream::PROGRAM, d])).collect()
}

pub fn run(cfg: &Config, a: &NafArgs, scale: Option<f64>, out: &Out) -> Result<()> {
    let f: BuiltinFn = a.func.parse()?;
    let mut noise: NoiseSpec = match &a.noise {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| imc_core::Error::Config(format!("noise: {e}")))?
        }
        None => cfg.noise,
    };
    if let Some(s) = scale {
        noise = noise.with_scale(s);
    }
    noise.validate()?;
    let noise = noise.with_seed(cfg.seed);
    let mut ncfg = cfg.naf;
    ncfg.seed = cfg.seed;
    if let Some(e) = a.epochs {
        ncfg.epochs = e;
    }
    ncfg.validate()?;

    let mut q = cfg.clone();
    q.quant.encoding = Encoding::Gray;
    let c = f.compile(&super::qspec_for(f, &q, None, None)?)?;
    let base = AcamUnit::program(&c, &noise, 0)?;
    let (tuned, reps) = finetune_unit(&base, &noise, &ncfg)?;

    let n = reps.len();
    let mut rows = Vec::new();
    for (k, r) in reps.iter().enumerate() {
        for (e, l) in r.losses.iter().enumerate() {
            rows.push([format!("bit_{}", n - 1 - k), (e + 1).to_string(), l.to_string()]);
        }
    }
    out.csv("losses.csv", &["bit", "epoch", "loss"], rows)?;
    out.json("image.json", &UnitImage::from_unit(&tuned)?)?;

    let devices = eval_devices(cfg.seed, cfg.shapes.devices);
    let pts = cfg.shapes.sweep_points;
    let mse = |u: &AcamUnit, s: Option<&NoiseSpec>| function_mse(u, |x| f.eval(x), s, &devices, pts, cfg.seed);
    let doubled = noise.with_scale(noise.scale * 2.0);
    let diverged: Vec<usize> = reps.iter().enumerate().filter(|(_, r)| r.diverged).map(|(k, _)| n - 1 - k).collect();
    out.json(
        "manifest.json",
        &json!({
            "command": "naf",
            "function": f.name(),
            "seed": cfg.seed,
            "noise_scale": noise.scale,
            "naf": ncfg,
            "mse": {
                "noise_free": mse(&base, None),
                "noisy_before": mse(&base, Some(&noise)),
                "noisy_after": mse(&tuned, Some(&noise)),
                "after_at_double_noise": mse(&tuned, Some(&doubled)),
            },
            "diverged_bits": diverged,
            "files": { "losses": "losses.csv", "image": "image.json" },
        }),
    )
}
