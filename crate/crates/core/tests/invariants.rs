//! Cross-module invariants.

use imc_core::acam::eval_unit;
use imc_core::codes::Encoding;
use imc_core::cost::{energy_report, ComponentCosts, Event, RunLedger};
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::{AcamUnit, NoiseSpec};
use imc_core::noisefault::*;
use imc_core::rng;
use proptest::prelude::*;
use std::sync::OnceLock;

fn units() -> &'static Vec<AcamUnit> {
    static U: OnceLock<Vec<AcamUnit>> = OnceLock::new();
    U.get_or_init(|| {
        BuiltinFn::ALL
            .iter()
            .map(|f| AcamUnit::program(&f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap(), &NoiseSpec::noise_free(), 0).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_functions_give_monotone_levels(f in 0usize..8, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let func = BuiltinFn::ALL[f];
        prop_assume!(func.is_monotone());
        let u = &units()[f];
        let (lo, hi) = (u.qspec.in_lo, u.qspec.in_hi);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let la = eval_unit(u, lo + a * (hi - lo), None).value();
        let lb = eval_unit(u, lo + b * (hi - lo), None).value();
        prop_assert!(la <= lb);
    }

    #[test]
    fn sampled_conductance_stays_in_range(g in 0.0f64..200.0, seed in 0u64..1000, read in 0u64..10, scale in 0.0f64..5.0) {
        let spec = NoiseSpec::synthetic(seed).with_scale(scale);
        let site = Site { image: 0, array: 1, row: 2, col: 3 };
        let v = sample_conductance(g, &spec, site, read);
        let (lo, hi) = g_range::<f64>();
        prop_assert!(v >= lo && v <= hi);
        prop_assert_eq!(v, sample_conductance(g, &spec, site, read));
        // programming is sampled once per site
        prop_assert_eq!(programmed_conductance(g, &spec, site), programmed_conductance(g, &spec, site));
    }

    #[test]
    fn sigma_is_nonnegative_and_monotone(a in 0.0f64..150.0, b in 0.0f64..150.0) {
        let spec = NoiseSpec::synthetic(0);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(spec.sigma_prog(a) >= 0.0 && spec.sigma_fluct(a) >= 0.0);
        prop_assert!(spec.sigma_prog(a) <= spec.sigma_prog(b) + 1e-15);
        prop_assert!(spec.sigma_fluct(a) <= spec.sigma_fluct(b) + 1e-15);
    }

    #[test]
    fn transfer_roundtrip(g in 0.01f64..150.0) {
        let t = NoiseSpec::synthetic(0).acam_transfer;
        let th = conductance_to_threshold(g, &t).unwrap();
        let back = threshold_to_conductance(th, &t).unwrap();
        prop_assert!((back - g).abs() <= 1e-9 * g);
        prop_assert!(conductance_to_threshold(g * 1.01, &t).unwrap() > th);
    }

    #[test]
    fn energy_is_linear_in_counts(n in 1u64..1000, k in 1u64..20) {
        let mut l = RunLedger::new();
        l.add(Event::AcamCellSearch, n);
        l.add(Event::AdderOp, 2 * n);
        l.add(Event::CrossbarColumnRead, n / 2 + 1);
        let c = ComponentCosts::default();
        let e1 = energy_report(&l, &c).unwrap();
        let ek = energy_report(&l.scaled(k), &c).unwrap();
        prop_assert!((ek.total_pj - k as f64 * e1.total_pj).abs() <= 1e-9 * ek.total_pj);
        let shares: f64 = e1.rows.iter().map(|r| r.share_pct).sum();
        prop_assert!((shares - 100.0).abs() < 1e-9);
    }

    #[test]
    fn fault_injection_is_idempotent(f in 0usize..8, rate in 0.0f64..0.2, seed in 0u64..100) {
        let u = &units()[f];
        let fm = FaultMap::random(&u.device_shapes(), rate, seed);
        let once = inject_faults(u, &fm).unwrap();
        prop_assert_eq!(inject_faults(&once, &fm).unwrap(), once.clone());
        prop_assert_eq!(FaultMap::from_csv(&fm.to_csv()).unwrap(), fm);
    }

    #[test]
    fn keyed_draws_ignore_call_order(seed in 0u64..1000, a in 0u64..100, b in 0u64..100) {
        let first = (rng::normal(rng::key(seed, &[a])), rng::normal(rng::key(seed, &[b])));
        let second = (rng::normal(rng::key(seed, &[b])), rng::normal(rng::key(seed, &[a])));
        prop_assert_eq!(first.0, second.1);
        prop_assert_eq!(first.1, second.0);
    }
}

#[test]
fn empty_ledger_has_zero_energy() {
    let e = energy_report(&RunLedger::new(), &ComponentCosts::default()).unwrap();
    assert_eq!(e.total_pj, 0.0);
}

#[test]
fn unit_search_energy_matches_cell_count() {
    let mut l = RunLedger::new();
    l.unit_eval(units()[0].total_cells(), 8);
    assert_eq!(l.get(Event::AcamCellSearch), 130);
    assert_eq!(l.get(Event::XorDecode), 7);
    let e = energy_report(&l, &ComponentCosts::default()).unwrap();
    assert!((e.energy("acam") - 130.0 * 0.44e-3).abs() < 1e-9, "{}", e.energy("acam"));
}
