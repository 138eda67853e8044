use std::process::{Command, Output};

fn imcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imcsim")).args(args).output().unwrap()
}

fn error_of(o: &Output) -> (String, String) {
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_slice(o.stderr.rsplit(|&b| b == b'\n').find(|l| !l.is_empty()).unwrap()).unwrap();
    (v["error"]["kind"].as_str().unwrap().to_string(), v["error"]["message"].as_str().unwrap().to_string())
}

#[test]
fn failures_emit_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let (kind, msg) = error_of(&imcsim(&["--out", out, "compile-fn", "--fn", "cosh"]));
    assert_eq!(kind, "config");
    assert!(msg.contains("cosh"));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[shapes]\nrowz = 3\n").unwrap();
    let (kind, _) = error_of(&imcsim(&["--config", cfg.to_str().unwrap(), "--out", out, "table1"]));
    assert_eq!(kind, "config");

    let o = imcsim(&["--out", out, "simulate", "--pipeline", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o).0, "usage");

    let (kind, _) = error_of(&imcsim(&["--out", out, "compile-fn", "--fn", "log", "--domain", "-1:1"]));
    assert_eq!(kind, "invalid_quant_spec");

    let (kind, _) = error_of(&imcsim(&["--noise-scale=-1", "--out", out, "table1"]));
    assert_eq!(kind, "invalid_noise");
}

#[test]
fn compile_writes_rows_and_image() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert!(imcsim(&["--out", out, "compile-fn", "--fn", "sigmoid", "--encoding", "binary"]).status.success());
    let rows = std::fs::read_to_string(tmp.path().join("rows.csv")).unwrap();
    assert!(rows.starts_with("bit,rows,capacity\nbit_7,1,1\nbit_6,2,2\n"));
    assert!(!tmp.path().join("image.json").exists());

    assert!(imcsim(&["--out", out, "compile-fn", "--fn", "sigmoid"]).status.success());
    let img = tmp.path().join("image.json");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["total_rows"], 128);

    // the image drives the fn pipeline noise-free with only quantization error
    let sim = tmp.path().join("sim");
    let o = imcsim(&["--noise-scale", "0", "--out", sim.to_str().unwrap(), "simulate", "--pipeline", "fn", "--image", img.to_str().unwrap(), "--samples", "500"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sim.join("manifest.json")).unwrap()).unwrap();
    assert!(m["stats"]["max_abs_error"].as_f64().unwrap() <= 0.5 / 255.0 + 1e-12);
    assert_eq!(m["ledger"]["counters"]["acam_cell_search"], 130 * 500);
}

#[test]
fn fault_map_file_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let map = tmp.path().join("fm.csv");
    // bit 1 holds 32 rows, so row 3 has no spare and stays stranded
    std::fs::write(&map, "array,row,col,mode\n6,3,0,stuck_high\n").unwrap();
    let out = tmp.path().join("o");
    let o = imcsim(&["--out", out.to_str().unwrap(), "faults", "--target", "acam", "--fault-map", map.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("fault_map.csv")).unwrap(), "array,row,col,mode\n6,3,0,stuck_high\n");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["faults"], 1);

    std::fs::write(&map, "9,0,0,stuck_low\n").unwrap();
    let o = imcsim(&["--out", out.to_str().unwrap(), "faults", "--target", "acam", "--fault-map", map.to_str().unwrap()]);
    assert_eq!(error_of(&o).0, "bad_address");
}
