use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use imc_core::cost::{energy_report, RunLedger};
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::{AcamUnit, Config, LogExpUnits, Matrix, NoiseSpec, UnitImage};
use imc_core::noisefault::Draw;
use imc_core::pipelines::{attention, attention_reference, fold_scale, softmax_reference, AttentionCore, Engine};
use imc_core::rng::{self, stream};
use serde_json::json;

use super::ErrorStats;
use crate::data;
use crate::output::Out;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Fn,
    Mul,
    Dot,
    Softmax,
    Attention,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub pipeline: Pipeline,
    /// Function for the `fn` pipeline.
    #[arg(long = "fn", value_name = "NAME", default_value = "sigmoid")]
    pub func: String,
    /// ACAM image JSON for the `fn` pipeline, as written by `compile-fn` or `naf`.
    #[arg(long, value_name = "FILE")]
    pub image: Option<std::path::PathBuf>,
    /// Samples (points, pairs, vectors or attention instances); the config shape otherwise.
    #[arg(long)]
    pub samples: Option<usize>,
}

pub struct Record {
    pub sample: usize,
    pub element: usize,
    pub inputs: Vec<f64>,
    pub output: f64,
    pub oracle: f64,
}

pub struct Run {
    pub input_names: Vec<&'static str>,
    pub records: Vec<Record>,
    pub ledger: RunLedger,
}

impl Run {
    pub fn stats(&self) -> ErrorStats {
        ErrorStats::of(&self.records.iter().map(|r| (r.output, r.oracle)).collect::<Vec<_>>())
    }
}

const TAG_A: u64 = 1;
const TAG_B: u64 = 2;
const TAG_W: u64 = 3;

fn active(noise: &NoiseSpec) -> Option<&NoiseSpec> {
    (!noise.is_noise_free()).then_some(noise)
}

fn load_unit(cfg: &Config, a: &SimulateArgs) -> Result<(AcamUnit, BuiltinFn)> {
    match &a.image {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let img: UnitImage = serde_json::from_str(&text).map_err(|e| imc_core::Error::Config(format!("image: {e}")))?;
            let f: BuiltinFn = img.name.parse()?;
            Ok((img.to_unit()?, f))
        }
        None => {
            let f: BuiltinFn = a.func.parse()?;
            let mut q = cfg.clone();
            q.quant.encoding = imc_core::codes::Encoding::Gray;
            let c = f.compile(&super::qspec_for(f, &q, None, None)?)?;
            Ok((AcamUnit::program(&c, &cfg.noise_spec(), 0)?, f))
        }
    }
}

/// Run `a.pipeline` on keyed inputs and pair every output with its float oracle.
pub fn execute(cfg: &Config, a: &SimulateArgs) -> Result<Run> {
    let seed = cfg.seed;
    let sh = &cfg.shapes;
    let spec = cfg.noise_spec();
    let noise = active(&spec);
    let mut records = Vec::new();
    let mut ledger = RunLedger::new();
    let rec = |sample, element, inputs, output, oracle| Record { sample, element, inputs, output, oracle };
    let input_names = match a.pipeline {
        Pipeline::Fn => {
            let (u, f) = load_unit(cfg, a)?;
            let (lo, hi) = (u.qspec.in_lo, u.qspec.in_hi);
            for i in 0..a.samples.unwrap_or(sh.sweep_points) {
                let x = data::uniform(seed, TAG_A, i as u64, lo, hi);
                let draw = noise.map(|s| Draw::new(s, rng::key(seed, &[stream::READ, i as u64])));
                records.push(rec(i, 0, vec![x], u.value(x, draw), f.eval(x)));
                ledger.unit_eval(u.total_cells(), u.n_bits());
            }
            vec!["x"]
        }
        Pipeline::Mul | Pipeline::Dot | Pipeline::Softmax => {
            let units = LogExpUnits::new(cfg.logexp, &spec)?;
            let mut e = Engine::new(&units, noise, stream::READ);
            match a.pipeline {
                Pipeline::Mul => {
                    for i in 0..a.samples.unwrap_or(sh.pairs) {
                        let (x, y) = (data::uniform(seed, TAG_A, i as u64, 0.0, 1.0), data::uniform(seed, TAG_B, i as u64, 0.0, 1.0));
                        records.push(rec(i, 0, vec![x, y], e.mul(x, y), x * y));
                    }
                }
                Pipeline::Dot => {
                    let n = sh.vec_len;
                    for i in 0..a.samples.unwrap_or(sh.rows) {
                        let x = data::vector(seed, TAG_A + 16 * i as u64, n, -1.0, 1.0);
                        let y = data::vector(seed, TAG_B + 16 * i as u64, n, -1.0, 1.0);
                        let exact: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                        records.push(rec(i, 0, vec![], e.dot(&x, &y)?, exact));
                    }
                }
                _ => {
                    for i in 0..a.samples.unwrap_or(sh.rows) {
                        let y = data::vector(seed, TAG_A + 16 * i as u64, sh.softmax_len, -3.0, 3.0);
                        let got = e.softmax(&y);
                        for (j, (g, r)) in got.iter().zip(softmax_reference(&y)).enumerate() {
                            records.push(rec(i, j, vec![], *g, r));
                        }
                    }
                }
            }
            ledger.merge(&e.ledger);
            match a.pipeline {
                Pipeline::Mul => vec!["a", "b"],
                _ => vec![],
            }
        }
        Pipeline::Attention => {
            let units = LogExpUnits::new(cfg.logexp, &spec)?;
            let (t, dm, dk) = (sh.tokens, sh.d_model, sh.d_k);
            let wr = 1.0 / (dm as f64).sqrt();
            for i in 0..a.samples.unwrap_or(8) {
                let base = 16 * i as u64;
                let wq = data::matrix(seed, TAG_W + base, dm, dk, -wr, wr);
                let wk = data::matrix(seed, TAG_W + base + 1, dm, dk, -wr, wr);
                let wv = data::matrix(seed, TAG_W + base + 2, dm, dk, -wr, wr);
                let x = data::matrix(seed, TAG_A + base, t, dm, -1.0, 1.0);
                let (fq, fk) = fold_scale(&wq, &wk, dk);
                let core = AttentionCore::program(&fq, &fk, &wv, 1.0, &spec)?;
                let (got, l) = attention(&core, &x, &x, &x, &units, noise, true)?;
                let want: Matrix = attention_reference(&x, &x, &x, &wq, &wk, &wv)?;
                for (j, (g, r)) in got.data.iter().zip(&want.data).enumerate() {
                    records.push(rec(i, j, vec![], *g, *r));
                }
                ledger.merge(&l);
            }
            vec![]
        }
    };
    Ok(Run { input_names, records, ledger })
}

fn write_outputs(run: &Run, out: &Out) -> Result<()> {
    let mut header = vec!["sample", "element"];
    header.extend(&run.input_names);
    header.extend(["output", "oracle", "error"]);
    out.csv(
        "outputs.csv",
        &header,
        run.records.iter().map(|r| {
            let mut row = vec![r.sample.to_string(), r.element.to_string()];
            row.extend(r.inputs.iter().map(f64::to_string));
            row.extend([r.output.to_string(), r.oracle.to_string(), (r.output - r.oracle).to_string()]);
            row
        }),
    )
}

pub fn run(cfg: &Config, a: &SimulateArgs, out: &Out) -> Result<()> {
    let r = execute(cfg, a)?;
    write_outputs(&r, out)?;
    let energy = energy_report(&r.ledger, &cfg.costs)?;
    out.json(
        "manifest.json",
        &json!({
            "command": "simulate",
            "pipeline": a.pipeline,
            "seed": cfg.seed,
            "noise_scale": cfg.noise.scale,
            "stats": r.stats(),
            "ledger": r.ledger,
            "energy_total_pj": energy.total_pj,
            "files": { "outputs": "outputs.csv" },
        }),
    )
}

pub fn report(cfg: &Config, a: &SimulateArgs, out: &Out) -> Result<()> {
    let r = execute(cfg, a)?;
    let energy = energy_report(&r.ledger, &cfg.costs)?;
    out.csv("ledger.csv", &["event", "count"], r.ledger.counters.iter().map(|(k, v)| [k.clone(), v.to_string()]))?;
    out.text("energy.csv", &energy.to_csv())?;
    out.json("energy.json", &energy)?;
    out.json("error_stats.json", &r.stats())?;
    out.json(
        "manifest.json",
        &json!({
            "command": "report",
            "pipeline": a.pipeline,
            "seed": cfg.seed,
            "noise_scale": cfg.noise.scale,
            "energy_note": "per-event energies derived from component power at a 1 GHz clock are approximations",
            "files": { "ledger": "ledger.csv", "energy": ["energy.csv", "energy.json"], "error_stats": "error_stats.json" },
        }),
    )
}
