use imc_core::codes::Encoding;
use imc_core::dtcompile::{row_counts, BuiltinFn, compile_fixed_mse};
fn main() {
    for f in BuiltinFn::ALL {
        let mut line = format!("{:9}", f.name());
        for enc in [Encoding::Binary, Encoding::Gray] {
            let c = f.compile::<f64>(&f.default_qspec(8, enc)).unwrap();
            let r = row_counts(&c);
            line += &format!(" {:?} tot={} mse={:.2e} |", r, r.iter().sum::<usize>(), compile_fixed_mse(&c, |x| f.eval(x)));
        }
        println!("{line}");
    }
}
