//! Per-bit loss gradients against central differences.

use imc_core::codes::Encoding;
use imc_core::dtcompile::BuiltinFn;
use imc_core::f64::{AcamUnit, NoiseSpec, SoftAcamParams};
use imc_core::naf::{bit_gradient, soft_bits};
use imc_core::rng;

#[test]
fn bit_gradient_matches_central_differences() {
    let f = BuiltinFn::Tanh;
    let u = AcamUnit::program(&f.compile(&f.default_qspec(8, Encoding::Gray)).unwrap(), &NoiseSpec::noise_free(), 0).unwrap();
    let mut p = SoftAcamParams::from_unit(&u, 1e-1).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..4000u64 {
        let bit = 1 + (i % 7) as usize;
        let n = p.bits[bit].rows.len();
        let k = (rng::uniform(rng::key(1, &[i])) * n as f64) as usize % n;
        let (wl, wh) = (p.bits[bit].w_lo[k], p.bits[bit].w_hi[k]);
        let x = wl + (wh - wl) * (0.05 + 0.9 * rng::uniform(rng::key(2, &[i])));
        if wl - p.origin < 1e-3 || p.top() - wh < 1e-3 {
            continue;
        }
        let target = i % 2 == 0;
        let (_, glo, ghi) = bit_gradient(&p, bit, x, target, None);
        let t = if target { 1.0 } else { 0.0 };
        let loss = |p: &SoftAcamParams| (soft_bits(p, x, None)[bit] - t).powi(2);
        for (upper, analytic) in [(false, glo[k]), (true, ghi[k])] {
            let w = if upper { wh } else { wl };
            let mut set = |v: f64| if upper { p.bits[bit].w_hi[k] = v } else { p.bits[bit].w_lo[k] = v };
            set(w + h);
            let up = loss(&p);
            let mut set = |v: f64| if upper { p.bits[bit].w_hi[k] = v } else { p.bits[bit].w_lo[k] = v };
            set(w - h);
            let down = loss(&p);
            if upper { p.bits[bit].w_hi[k] = w } else { p.bits[bit].w_lo[k] = w }
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-8 {
                assert!((analytic - numeric).abs() <= 1e-4 * scale, "bit {bit} row {k}: {analytic} vs {numeric}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 100, "only {checked} points checked");
}
