//! Event counting and per-component energy accounting.
//!
//! Per-event energies default to `power / clock / instances`, which assumes every
//! instance is busy each cycle. Treat them as approximations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codes::Encoding;
use crate::dtcompile::{compile_fixed_mse, row_counts, BuiltinFn};
use crate::error::{Error, Result};

/// Countable hardware events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    CrossbarColumnRead,
    AcamCellSearch,
    /// One full unit evaluation; informational, carries no energy of its own.
    AcamUnitEval,
    DacConversion,
    XorDecode,
    AdderOp,
    InputBufferAccess,
    OutputBufferAccess,
    RegisterAccess,
    SharedMemoryAccess,
}

impl Event {
    pub const ALL: [Event; 10] = [
        Event::CrossbarColumnRead,
        Event::AcamCellSearch,
        Event::AcamUnitEval,
        Event::DacConversion,
        Event::XorDecode,
        Event::AdderOp,
        Event::InputBufferAccess,
        Event::OutputBufferAccess,
        Event::RegisterAccess,
        Event::SharedMemoryAccess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::CrossbarColumnRead => "crossbar_column_read",
            Event::AcamCellSearch => "acam_cell_search",
            Event::AcamUnitEval => "acam_unit_eval",
            Event::DacConversion => "dac_conversion",
            Event::XorDecode => "xor_decode",
            Event::AdderOp => "adder_op",
            Event::InputBufferAccess => "input_buffer_access",
            Event::OutputBufferAccess => "output_buffer_access",
            Event::RegisterAccess => "register_access",
            Event::SharedMemoryAccess => "shared_memory_access",
        }
    }

    /// Component whose energy the event draws, if any.
    pub fn component(self) -> Option<&'static str> {
        Some(match self {
            Event::CrossbarColumnRead => "dpe",
            Event::AcamCellSearch => "acam",
            Event::AcamUnitEval => return None,
            Event::DacConversion => "dac",
            Event::XorDecode => "xor",
            Event::AdderOp => "adders",
            Event::InputBufferAccess => "input_buffer",
            Event::OutputBufferAccess => "output_buffer",
            Event::RegisterAccess => "register",
            Event::SharedMemoryAccess => "shared_memory",
        })
    }
}

impl std::str::FromStr for Event {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Event::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| Error::UnknownEvent(s.to_string()))
    }
}

/// Event counts of one run, keyed by event name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLedger {
    pub counters: BTreeMap<String, u64>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, e: Event, n: u64) {
        if n > 0 {
            *self.counters.entry(e.name().to_string()).or_insert(0) += n;
        }
    }

    pub fn get(&self, e: Event) -> u64 {
        self.counters.get(e.name()).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &RunLedger) {
        for (k, v) in &other.counters {
            *self.counters.entry(k.clone()).or_insert(0) += v;
        }
    }

    /// Every counter multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        Self { counters: self.counters.iter().map(|(n, v)| (n.clone(), v * k)).collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.counters.values().all(|&v| v == 0)
    }

    /// One unit search: every cell plus the Gray decode.
    pub fn unit_eval(&mut self, cells: usize, n_bits: usize) {
        self.add(Event::AcamUnitEval, 1);
        self.add(Event::AcamCellSearch, cells as u64);
        self.add(Event::XorDecode, n_bits.saturating_sub(1) as u64);
    }
}

/// Fold per-worker ledgers into one.
pub fn tally<'a>(parts: impl IntoIterator<Item = &'a RunLedger>) -> RunLedger {
    let mut l = RunLedger::new();
    for p in parts {
        l.merge(p);
    }
    l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub power_mw: f64,
    pub area_mm2: f64,
    /// Instances sharing `power_mw`.
    #[serde(default = "one")]
    pub instances: f64,
    /// Explicit per-event energy; overrides the power-derived value.
    #[serde(default)]
    pub energy_pj: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentCosts {
    pub clock_ghz: f64,
    pub components: Vec<Component>,
}

impl Default for ComponentCosts {
    /// Core and tile figures at 1 GHz; ACAM searches cost 0.44 fJ per cell.
    fn default() -> Self {
        let c = |name: &str, power_mw: f64, area_mm2: f64, instances: f64, energy_pj: Option<f64>| Component {
            name: name.to_string(),
            power_mw,
            area_mm2,
            instances,
            energy_pj,
        };
        Self {
            clock_ghz: 1.0,
            components: vec![
                // four 256x256 arrays, energy per column read
                c("dpe", 1.31, 0.011534, 4.0 * 256.0, None),
                c("acam", 43.52, 0.041431, 256.0 * 130.0, Some(0.44e-3)),
                c("input_buffer", 0.23, 0.00077, 256.0, None),
                c("output_buffer", 0.23, 0.00077, 256.0, None),
                c("register", 0.12 + 0.69, 0.000385 + 0.00231, 128.0 + 768.0, None),
                c("dac", 4.0, 0.00017, 4.0 * 256.0, None),
                c("xor", 0.385, 0.000215, 7.0 * 256.0, None),
                c("adders", 12.8, 0.0154, 256.0, None),
                c("shared_memory", 20.7, 0.083, 64.0 * 1024.0, None),
            ],
        }
    }
}

impl ComponentCosts {
    pub fn validate(&self) -> Result<()> {
        if !(self.clock_ghz > 0.0) {
            return Err(Error::Config("clock must be positive".into()));
        }
        for c in &self.components {
            let neg = c.power_mw < 0.0 || c.area_mm2 < 0.0 || !(c.instances > 0.0) || c.energy_pj.is_some_and(|e| e < 0.0);
            if neg {
                return Err(Error::Config(format!("component `{}` has negative or zero figures", c.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Energy of one event on a component, in pJ.
    pub fn per_event_pj(&self, name: &str) -> Option<f64> {
        self.get(name).map(|c| c.energy_pj.unwrap_or(c.power_mw / self.clock_ghz / c.instances))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub component: String,
    pub events: u64,
    pub energy_pj: f64,
    pub share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub rows: Vec<EnergyRow>,
    pub total_pj: f64,
}

impl EnergyBreakdown {
    pub fn energy(&self, component: &str) -> f64 {
        self.rows.iter().find(|r| r.component == component).map_or(0.0, |r| r.energy_pj)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,events,energy_pj,share_pct\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6e},{:.4}\n", r.component, r.events, r.energy_pj, r.share_pct));
        }
        s.push_str(&format!("total,,{:.6e},100.0000\n", self.total_pj));
        s
    }
}

/// Energy per component: count times per-event energy, with percentage shares.
pub fn energy_report(l: &RunLedger, c: &ComponentCosts) -> Result<EnergyBreakdown> {
    c.validate()?;
    let mut per: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
    for (kind, &n) in &l.counters {
        let event: Event = kind.parse()?;
        let Some(comp) = event.component() else { continue };
        let e = c.per_event_pj(comp).ok_or_else(|| Error::Config(format!("no cost entry for component `{comp}`")))?;
        let slot = per.entry(comp).or_insert((0, 0.0));
        slot.0 += n;
        slot.1 += n as f64 * e;
    }
    let total: f64 = per.values().map(|v| v.1).sum();
    let rows = per
        .into_iter()
        .map(|(name, (events, energy))| EnergyRow {
            component: name.to_string(),
            events,
            energy_pj: energy,
            share_pct: if total > 0.0 { 100.0 * energy / total } else { 0.0 },
        })
        .collect();
    Ok(EnergyBreakdown { rows, total_pj: total })
}

/// Row counts per function and encoding, plus the compiled MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub n_bits: u32,
    pub functions: Vec<String>,
    pub encodings: Vec<Encoding>,
    /// `counts[f][e]` is MSB-first rows per bit.
    pub counts: Vec<Vec<Vec<usize>>>,
    pub mse: Vec<f64>,
}

impl Table1 {
    pub fn total(&self, f: usize, e: usize) -> usize {
        self.counts[f][e].iter().sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f == name)
    }

    /// Table layout: one column per function, cells `B/G` per encoding order.
    pub fn to_csv(&self) -> String {
        let cell = |pick: &dyn Fn(usize) -> String| (0..self.encodings.len()).map(pick).collect::<Vec<_>>().join("/");
        let mut s = String::from("row");
        for f in &self.functions {
            s.push(',');
            s.push_str(f);
        }
        s.push('\n');
        s.push_str("enc");
        for _ in &self.functions {
            s.push(',');
            s.push_str(&self.encodings.iter().map(|e| if *e == Encoding::Binary { "B" } else { "G" }).collect::<Vec<_>>().join("/"));
        }
        s.push('\n');
        let n = self.n_bits as usize;
        for k in 0..n {
            s.push_str(&format!("bit_{}", n - 1 - k));
            for f in 0..self.functions.len() {
                s.push(',');
                s.push_str(&cell(&|e| self.counts[f][e][k].to_string()));
            }
            s.push('\n');
        }
        s.push_str("total");
        for f in 0..self.functions.len() {
            s.push(',');
            s.push_str(&cell(&|e| self.total(f, e).to_string()));
        }
        s.push('\n');
        s.push_str("mse");
        for m in &self.mse {
            s.push_str(&format!(",{m:.3e}"));
        }
        s.push('\n');
        s
    }
}

/// Compile every function under every encoding and tabulate row counts.
pub fn emit_table1(functions: &[BuiltinFn], n_bits: u32, encodings: &[Encoding]) -> Result<Table1> {
    use rayon::prelude::*;
    let per_fn: Vec<(Vec<Vec<usize>>, f64)> = functions
        .par_iter()
        .map(|&f| {
            let mut counts = Vec::new();
            let mut mse = 0.0;
            for (k, &enc) in encodings.iter().enumerate() {
                let c = f.compile::<f64>(&f.default_qspec(n_bits, enc))?;
                counts.push(row_counts(&c));
                if k == 0 {
                    mse = compile_fixed_mse(&c, |x| f.eval(x));
                }
            }
            Ok((counts, mse))
        })
        .collect::<Result<_>>()?;
    Ok(Table1 {
        n_bits,
        functions: functions.iter().map(|f| f.name().to_string()).collect(),
        encodings: encodings.to_vec(),
        counts: per_fn.iter().map(|p| p.0.clone()).collect(),
        mse: per_fn.iter().map(|p| p.1).collect(),
    })
}
