use anyhow::Result;
use clap::Args;
use imc_core::codes::Encoding;
use imc_core::cost::emit_table1;
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::Config;
use serde_json::json;

use crate::output::Out;

#[derive(Debug, Args)]
pub struct Table1Args {
    #[arg(long)]
    pub bits: Option<u32>,
}

pub fn run(cfg: &Config, a: &Table1Args, out: &Out) -> Result<()> {
    let bits = a.bits.unwrap_or(cfg.quant.n_bits);
    let t = emit_table1(&BuiltinFn::ALL, bits, &[Encoding::Binary, Encoding::Gray])?;
    out.text("table1.csv", &t.to_csv())?;
    let totals: serde_json::Map<String, serde_json::Value> =
        t.functions.iter().enumerate().map(|(f, name)| (name.clone(), json!({ "binary": t.total(f, 0), "gray": t.total(f, 1) }))).collect();
    out.json("manifest.json", &json!({ "command": "table1", "n_bits": bits, "totals": totals, "files": { "table": "table1.csv" } }))
}
