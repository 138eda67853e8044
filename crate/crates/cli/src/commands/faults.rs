use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use imc_core::codes::{Encoding, QuantSpec};
use imc_core::crossbar::{pins_from, program_asl, program_asl_pinned, program_dsl, program_dsl_sliced, vmm};
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::{AcamUnit, Config, CrossbarImage, Matrix, NoiseSpec};
use imc_core::noisefault::{apply_plan, check_sites, inject_faults, mitigation_plan, Draw, FaultMap, FaultTarget};
use imc_core::rng::{self, stream};
use serde_json::json;

use crate::data;
use crate::output::Out;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Crossbar,
    Acam,
}

#[derive(Debug, Args)]
pub struct FaultsArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    /// Stuck-at rate; the config value otherwise.
    #[arg(long)]
    pub rate: Option<f64>,
    /// CSV `array,row,col,mode` used instead of random maps.
    #[arg(long, value_name = "FILE")]
    pub fault_map: Option<std::path::PathBuf>,
    /// Function for the ACAM target.
    #[arg(long = "fn", value_name = "NAME", default_value = "sigmoid")]
    pub func: String,
}

/// Mean squared error of column outputs over full scale, as read from the crossbar.
pub fn crossbar_mse(img: &CrossbarImage, w: &Matrix, xs: &Matrix, spec: &NoiseSpec) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..xs.rows {
        let draw = (!spec.is_noise_free()).then(|| Draw::new(spec, rng::key(spec.seed, &[stream::READ, i as u64])));
        let got = vmm(img, xs.row(i), draw, 1)?;
        let exact = w.vecmul(xs.row(i))?;
        total += got.analog_out.iter().zip(&exact).zip(&img.col_scale).map(|((a, e), s)| (a - e / s).powi(2)).sum::<f64>();
    }
    Ok(total / (xs.rows * w.cols) as f64)
}

fn load_map(a: &FaultsArgs) -> Result<Option<FaultMap>> {
    a.fault_map
        .as_ref()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FaultMap::from_csv(&text)?)
        })
        .transpose()
}

pub fn run(cfg: &Config, a: &FaultsArgs, out: &Out) -> Result<()> {
    let rate = a.rate.unwrap_or(cfg.faults.rate);
    if !(0.0..=1.0).contains(&rate) {
        return Err(imc_core::Error::Config(format!("fault rate {rate} outside [0, 1]")).into());
    }
    let given = load_map(a)?;
    match a.target {
        Target::Crossbar => crossbar(cfg, rate, given, out),
        Target::Acam => acam(cfg, a, rate, given, out),
    }
}

fn crossbar(cfg: &Config, rate: f64, given: Option<FaultMap>, out: &Out) -> Result<()> {
    let (seed, sh) = (cfg.seed, &cfg.shapes);
    let spec = cfg.noise_spec();
    let w = data::matrix(seed, 3, sh.rows, sh.cols, -1.0, 1.0);
    let xs = data::matrix(seed, 1, sh.rows, sh.rows, -1.0, 1.0);
    let q = QuantSpec::new(-1.0, 1.0, -1.0, 1.0, cfg.quant.n_bits, Encoding::Binary)?;
    let maps = if given.is_some() { 1 } else { cfg.faults.maps };

    let mut summary = Vec::new();
    let mut plans = serde_json::Map::new();
    for (s, scheme) in ["asl", "dsl"].into_iter().enumerate() {
        let clean = if s == 0 { program_asl(&w, 1.0, &spec, 0)? } else { program_dsl(&w, &q, &spec, 0)? };
        let base = crossbar_mse(&clean, &w, &xs, &spec)?;
        let (mut mse, mut faults, mut clamped) = (0.0, 0usize, 0usize);
        let mut per_map = Vec::new();
        for m in 0..maps {
            let fm = match &given {
                Some(fm) => fm.clone(),
                None => FaultMap::random(&clean.device_shapes(), rate, rng::key(seed, &[stream::FAULT, s as u64, m as u64])),
            };
            check_sites(&clean, &fm)?;
            if m == 0 {
                out.text(&format!("fault_map_{scheme}.csv"), &fm.to_csv())?;
            }
            // programming sees the pins and compensates around them
            let pins = pins_from(&fm);
            let img = if s == 0 { program_asl_pinned(&w, 1.0, &spec, 0, &pins)? } else { program_dsl_sliced(&w, &q, 1, &spec, 0, &pins)? };
            mse += crossbar_mse(&img, &w, &xs, &spec)?;
            faults += fm.len();
            clamped += img.clamped;
            per_map.push(json!({ "faults": fm.len(), "clamped_residuals": img.clamped }));
        }
        let k = maps as f64;
        summary.push([scheme.to_string(), rate.to_string(), maps.to_string(), (faults as f64 / k).to_string(), base.to_string(), (mse / k).to_string(), (clamped as f64 / k).to_string()]);
        plans.insert(scheme.into(), json!({ "strategy": "pin-aware programming", "maps": per_map }));
    }
    out.csv("summary.csv", &["scheme", "rate", "maps", "faults_mean", "mse_fault_free", "mse_faulty", "clamped_mean"], summary)?;
    out.json("plan.json", &plans)?;
    out.json(
        "manifest.json",
        &json!({
            "command": "faults",
            "target": "crossbar",
            "seed": seed,
            "rate": rate,
            "noise_scale": cfg.noise.scale,
            "shape": [sh.rows, sh.cols],
            "files": { "summary": "summary.csv", "plan": "plan.json", "fault_maps": ["fault_map_asl.csv", "fault_map_dsl.csv"] },
        }),
    )
}

fn acam(cfg: &Config, a: &FaultsArgs, rate: f64, given: Option<FaultMap>, out: &Out) -> Result<()> {
    let f: BuiltinFn = a.func.parse()?;
    let mut q = cfg.clone();
    q.quant.encoding = Encoding::Gray;
    let c = f.compile(&super::qspec_for(f, &q, None, None)?)?;
    let u = AcamUnit::program(&c, &NoiseSpec::noise_free(), 0)?;
    let fm = match given {
        Some(fm) => fm,
        None => FaultMap::random(&u.device_shapes(), rate, rng::key(cfg.seed, &[stream::FAULT, 2])),
    };
    let faulty = inject_faults(&u, &fm)?;
    let plan = mitigation_plan(&faulty, &fm)?;
    let fixed = apply_plan(&faulty, &plan);
    out.text("fault_map.csv", &fm.to_csv())?;
    out.json("plan.json", &plan)?;

    // noise-free sweep: mismatches against the fault-free unit
    let (lo, hi) = (u.qspec.in_lo, u.qspec.in_hi);
    let n = cfg.shapes.sweep_points;
    let xs: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * (k as f64 + 0.5) / n as f64).collect();
    let want: Vec<u32> = xs.iter().map(|&x| u.level(x, None)).collect();
    let row = |stage: &str, v: &AcamUnit| {
        let lv: Vec<u32> = xs.iter().map(|&x| v.level(x, None)).collect();
        let wrong = lv.iter().zip(&want).filter(|(p, q)| p != q).count();
        let mse = xs.iter().zip(&lv).map(|(&x, &l)| (v.qspec.level_value(l) - f.eval(x)).powi(2)).sum::<f64>() / n as f64;
        [stage.to_string(), wrong.to_string(), (wrong as f64 / n as f64).to_string(), mse.to_string()]
    };
    out.csv("summary.csv", &["stage", "mismatches", "mismatch_rate", "mse"], [row("fault_free", &u), row("faulty", &faulty), row("mitigated", &fixed)])?;
    out.json(
        "manifest.json",
        &json!({
            "command": "faults",
            "target": "acam",
            "function": f.name(),
            "seed": cfg.seed,
            "rate": rate,
            "faults": fm.len(),
            "remapped_rows": plan.arrays.iter().map(|p| p.remaps.len()).sum::<usize>(),
            "unrecoverable_arrays": plan.unrecoverable(),
            "files": { "summary": "summary.csv", "plan": "plan.json", "fault_map": "fault_map.csv" },
        }),
    )
}
