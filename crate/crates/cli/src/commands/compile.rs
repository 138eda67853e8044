use anyhow::Result;
use clap::Args;
use imc_core::acam::unit_capacity;
use imc_core::codes::Encoding;
use imc_core::dtcompile::{compile_fixed_mse, row_counts, BuiltinFn};
use imc_core::f64::{AcamUnit, Config, UnitImage};
use serde_json::json;

use crate::output::Out;

#[derive(Debug, Args)]
pub struct CompileArgs {
    /// Built-in function name.
    #[arg(long = "fn", value_name = "NAME")]
    pub func: String,
    #[arg(long)]
    pub bits: Option<u32>,
    /// `binary` or `gray`.
    #[arg(long)]
    pub encoding: Option<String>,
    /// Input domain `LO:HI`; the output range follows from the function.
    #[arg(long, value_name = "LO:HI", allow_hyphen_values = true)]
    pub domain: Option<String>,
}

pub fn run(cfg: &Config, a: &CompileArgs, out: &Out) -> Result<()> {
    let f: BuiltinFn = a.func.parse()?;
    let mut cfg = cfg.clone();
    if let Some(e) = &a.encoding {
        cfg.quant.encoding = e.parse::<Encoding>()?;
    }
    let q = super::qspec_for(f, &cfg, a.bits, a.domain.as_deref())?;
    let c = f.compile(&q)?;
    let counts = row_counts(&c);
    let n = counts.len();
    let cap = unit_capacity(q.n_bits);
    out.csv(
        "rows.csv",
        &["bit", "rows", "capacity"],
        counts.iter().zip(&cap).enumerate().map(|(k, (r, c))| [format!("bit_{}", n - 1 - k), r.to_string(), c.to_string()]),
    )?;
    out.json("compiled.json", &c)?;

    // only Gray functions that fit the per-bit provisioning become an image
    let image = if q.encoding == Encoding::Gray && counts.iter().zip(&cap).all(|(r, c)| r <= c) {
        let u = AcamUnit::program(&c, &cfg.noise_spec(), 0)?;
        out.json("image.json", &UnitImage::from_unit(&u)?)?;
        Some("image.json")
    } else {
        log::info!("no ACAM image for {} encoding or rows over capacity", if q.encoding == Encoding::Gray { "Gray" } else { "Binary" });
        None
    };
    out.json(
        "manifest.json",
        &json!({
            "command": "compile-fn",
            "function": f.name(),
            "qspec": q,
            "total_rows": c.total_rows(),
            "rows_per_bit": counts,
            "quantization_mse": compile_fixed_mse(&c, |x| f.eval(x)),
            "files": { "rows": "rows.csv", "compiled": "compiled.json", "image": image },
        }),
    )
}
