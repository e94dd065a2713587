use maskident::expcli::*;
use serde_json::Value;
use std::path::PathBuf;
use std::process::Command as Proc;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_maskident"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("maskident-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write_config(name: &str, text: &str) -> PathBuf {
    let p = scratch(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn parses_each_command() {
    let cases = [
        r#"{"command":"predict","generator":{"d":4,"k":2,"seed":3},"task":"x2|x1","inputs":[1]}"#,
        r#"{"command":"recover","generator":{"kind":"ghmm","d":3,"k":2},"task":"x2|x1","method":"far-field","trials":5}"#,
        r#"{"command":"counterexample","construction":"power_rotation","parameters":{"t":3,"a":0.5}}"#,
        r#"{"command":"kruskal-rank","matrix":[[1,0],[0,1],[1,1]]}"#,
        r#"{"command":"verify-fixtures"}"#,
    ];
    for c in cases {
        let cfg = parse_config(c).unwrap_or_else(|e| panic!("{c}: {e}"));
        assert_eq!(cfg.seed, 0);
    }
}

#[test]
fn unknown_command_lists_variants() {
    let e = parse_config(r#"{"command":"fly"}"#).unwrap_err().to_string();
    assert!(e.contains("command"), "{e}");
    for v in ["predict", "recover", "counterexample", "kruskal-rank", "verify-fixtures"] {
        assert!(e.contains(v), "{e}");
    }
}

#[test]
fn errors_name_the_field() {
    let e = parse_config(r#"{"command":"recover","generator":{"d":4,"k":2,"colour":1},"task":"x2x3|x1"}"#).unwrap_err().to_string();
    assert!(e.contains("generator") && e.contains("colour"), "{e}");
    let e = parse_config(r#"{"command":"recover","generator":{"d":4,"k":2},"task":"x2x3|x1","tolerances":{"error":-1}}"#).unwrap_err().to_string();
    assert!(e.contains("tolerances.error"), "{e}");
    let e = parse_config(r#"{"command":"recover","generator":{"d":4,"k":2}}"#).unwrap_err().to_string();
    assert!(e.contains("task"), "{e}");
    let e = parse_config(r#"{"command":"recover","generator":{"d":4,"k":2},"task":"x2x3|x1","trials":0}"#).unwrap_err().to_string();
    assert!(e.contains("trials"), "{e}");
    let e = parse_config(r#"{"command":"recover","model_file":"/nonexistent/m.json","task":"x2x3|x1"}"#).unwrap_err().to_string();
    assert!(e.contains("model_file"), "{e}");
}

#[test]
fn default_seed_is_echoed() {
    let cfg = parse_config(r#"{"command":"kruskal-rank","shape":[3,4]}"#).unwrap();
    let report = run_batch(&cfg, Some(1)).unwrap();
    let v: Value = serde_json::from_str(&report_json(&report)).unwrap();
    assert_eq!(v["config"]["seed"], 0);
    assert_eq!(v["config"]["trials"], 1);
    assert_eq!(v["rows"][0]["detail"]["kruskal_rank"], 3);
}

#[test]
fn reports_are_deterministic_apart_from_timing() {
    let cfg = parse_config(r#"{"command":"recover","generator":{"d":4,"k":3},"task":"x1x2|x3","trials":12,"seed":7}"#).unwrap();
    let strip = |threads| {
        let r = run_batch(&cfg, Some(threads)).unwrap();
        let mut v: Value = serde_json::from_str(&report_json(&r)).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        serde_json::to_string_pretty(&v).unwrap()
    };
    let a = strip(1);
    assert_eq!(a, strip(4));
    assert_eq!(a, strip(3));
}

#[test]
fn report_round_trips_and_aggregate_recomputes() {
    let cfg = parse_config(r#"{"command":"recover","generator":{"kind":"ghmm","d":3,"k":2},"task":"x2|x1","trials":6,"seed":2}"#).unwrap();
    let r = run_batch(&cfg, None).unwrap();
    let back: BatchReport = serde_json::from_str(&report_json(&r)).unwrap();
    assert_eq!(back.rows, r.rows);
    assert_eq!(aggregate(&back.rows), r.aggregate);
    assert_eq!(back.config, cfg);
}

#[test]
fn csv_has_one_row_per_trial() {
    let cfg = parse_config(r#"{"command":"recover","generator":{"d":4,"k":2},"task":"x2x3|x1","trials":9}"#).unwrap();
    let r = run_batch(&cfg, None).unwrap();
    let mut buf = Vec::new();
    write_csv(&r, &mut buf).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let recs: Vec<_> = rd.records().map(|x| x.unwrap()).collect();
    assert_eq!(recs.len(), 9);
    for (i, rec) in recs.iter().enumerate() {
        assert_eq!(rec[0].parse::<u64>().unwrap(), i as u64);
        assert_eq!(rec[1].parse::<u64>().unwrap(), maskident::seeding::splitmix64(0, i as u64));
        assert!(rec[3].contains('e'));
        assert_eq!(&rec[7], "true");
    }
}

#[test]
fn fixed_generator_seed_repeats_instance() {
    let cfg = parse_config(r#"{"command":"predict","generator":{"d":3,"k":2,"seed":11},"task":"x2|x1","inputs":[0],"trials":3}"#).unwrap();
    let r = run_batch(&cfg, None).unwrap();
    let p0 = &r.rows[0].detail["prediction"];
    assert!(r.rows.iter().all(|row| &row.detail["prediction"] == p0 && row.pass));
    let cfg = parse_config(r#"{"command":"predict","generator":{"d":3,"k":2},"task":"x2|x1","inputs":[0],"trials":3}"#).unwrap();
    let r = run_batch(&cfg, None).unwrap();
    assert_ne!(r.rows[0].detail["prediction"], r.rows[1].detail["prediction"]);
}

#[test]
fn binary_version_and_bad_config() {
    let out = bin().arg("--version").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("maskident"));
    let c = write_config("fly.json", r#"{"command":"fly"}"#);
    let out = bin().args(["predict", "--config"]).arg(&c).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("verify-fixtures"));
    let c = write_config("mismatch.json", r#"{"command":"verify-fixtures"}"#);
    let out = bin().args(["recover", "--config"]).arg(&c).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_infeasible_angle_exits_one() {
    let c = write_config(
        "angle.json",
        r#"{"command":"counterexample","construction":"simplex_rotation","parameters":{"theta":1.0},
            "model":{"kind":"hmm","d":3,"k":3,
              "emission":[[0.9,0.05,0.05],[0.05,0.9,0.05],[0.05,0.05,0.9]],
              "transition":[[0.8,0.1,0.1],[0.1,0.8,0.1],[0.1,0.1,0.8]]}}"#,
    );
    let json = scratch("angle-out.json");
    let out = bin().args(["counterexample", "--config"]).arg(&c).arg("--out-json").arg(&json).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let err = v["rows"][0]["error"].as_str().unwrap();
    assert!(err.contains("feasible"), "{err}");
}

#[test]
fn binary_verify_fixtures_passes() {
    let csv_path = scratch("fixtures.csv");
    let out = bin().args(["verify-fixtures", "--out-json", "/dev/null", "--out-csv"]).arg(&csv_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + 15);
}

#[test]
fn binary_hundred_trial_batch() {
    let c = write_config("batch.json", r#"{"command":"recover","generator":{"d":5,"k":3},"task":"x2x3|x1","trials":100}"#);
    let (j, k) = (scratch("batch.json.out"), scratch("batch.csv"));
    let out = bin()
        .args(["recover", "--seed", "5", "--config"])
        .arg(&c)
        .arg("--out-json")
        .arg(&j)
        .arg("--out-csv")
        .arg(&k)
        .env(THREADS_ENV, "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: BatchReport = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(r.config.seed, 5);
    assert_eq!(r.aggregate.passed, 100);
    assert!(r.aggregate.max_err_primary.unwrap() <= 1e-6);
    assert_eq!(std::fs::read_to_string(&k).unwrap().lines().count(), 101);
}
