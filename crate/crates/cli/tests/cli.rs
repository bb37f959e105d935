use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use splatdeform::ply::{load_splats, write_splats, FormatOptions};
use splatdeform::synthetic::{planar_sheet, splat_with_frame, SheetOptions};
use splatdeform::{SplatSet, Vec3};

fn splatdeform(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatdeform"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPLATDEFORM_CACHE_DIR")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn three_disks(dir: &Path) -> PathBuf {
    let splats = (0..3)
        .map(|i| splat_with_frame(Vec3::new(i as f64, 0.0, 0.0), Vec3::x(), Vec3::z(), [0.6, 0.6]))
        .collect();
    let path = dir.join("disks.ply");
    write_splats(&path, &SplatSet::from_splats(splats)).unwrap();
    path
}

fn sheet(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("sheet.ply");
    let set = planar_sheet(&SheetOptions { nx: n, ny: n, jitter: 0.2, seed: 3, ..SheetOptions::default() });
    write_splats(&path, &set).unwrap();
    path
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn graph_file(cache: &Path) -> PathBuf {
    std::fs::read_dir(cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "txt"))
        .expect("cached graph")
}

#[test]
fn build_graph_reports_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let scene = three_disks(dir.path());
    let cache = dir.path().join("cache");
    let args = ["build-graph", "--input", s(&scene), "--cache-dir", s(&cache)];

    let first = ok(&splatdeform(dir.path(), &args));
    assert_eq!(first["nodes"], 3);
    assert_eq!(first["edges"], 2);
    assert_eq!(first["components"], 1);
    assert_eq!(first["cache"], "miss");

    let second = ok(&splatdeform(dir.path(), &args));
    assert_eq!(second["cache"], "hit");
    assert_eq!(second["edges"], 2);

    // same bytes, new timestamp: the content hash still matches
    let bytes = std::fs::read(&scene).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    std::fs::write(&scene, &bytes).unwrap();
    assert_eq!(ok(&splatdeform(dir.path(), &args))["cache"], "hit");

    // different parameters use a different entry
    let wider = ok(&splatdeform(dir.path(), &[&args[..], &["--epsilon", "0.01"]].concat()));
    assert_eq!(wider["cache"], "miss");
}

#[test]
fn corrupted_cache_is_rebuilt_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let scene = three_disks(dir.path());
    let cache = dir.path().join("cache");
    let args = ["build-graph", "--input", s(&scene), "--cache-dir", s(&cache)];
    ok(&splatdeform(dir.path(), &args));

    std::fs::write(graph_file(&cache), "splatgraph 3 0.1\n0 1 oops\n").unwrap();
    let out = splatdeform(dir.path(), &args);
    let stats = ok(&out);
    assert_eq!(stats["cache"], "rebuilt");
    assert_eq!(stats["edges"], 2);
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));

    assert_eq!(ok(&splatdeform(dir.path(), &args))["cache"], "hit");
}

#[test]
fn cache_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let scene = three_disks(dir.path());
    let from_env = dir.path().join("env-cache");
    let out = Command::new(env!("CARGO_BIN_EXE_splatdeform"))
        .args(["build-graph", "--input", s(&scene)])
        .current_dir(dir.path())
        .env("SPLATDEFORM_CACHE_DIR", &from_env)
        .output()
        .unwrap();
    ok(&out);
    graph_file(&from_env);
    assert!(!dir.path().join(".splatdeform-cache").exists());
}

#[test]
fn zero_displacement_reproduces_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 12);
    let handles = write(dir.path(), "h.json", r#"{"handles":[{"index":5,"displacement":[0,0,0]}]}"#);
    let out = dir.path().join("out.ply");
    for method in ["arap", "bbw"] {
        ok(&splatdeform(
            dir.path(),
            &["deform", "-i", s(&scene), "--handles", s(&handles), "--method", method, "-o", s(&out), "--no-cache"],
        ));
        let (a, _) = load_splats(&scene, &FormatOptions::default()).unwrap();
        let (b, _) = load_splats(&out, &FormatOptions::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.splats.iter().zip(&b.splats) {
            assert!((x.mean - y.mean).norm() < 1e-9, "{method}");
            assert!((x.scales[0] - y.scales[0]).abs() < 1e-9 && (x.scales[1] - y.scales[1]).abs() < 1e-9);
            assert!(x.rotation.angle_to(&y.rotation) < 1e-6);
        }
    }
}

#[test]
fn bbw_weights_are_written_and_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 12);
    let handles = write(
        dir.path(),
        "h.json",
        r#"{"method":"bbw","handles":[{"index":0,"displacement":[0,0,0.1]},{"index":143,"displacement":[0,0,-0.1]}]}"#,
    );
    let weights = dir.path().join("w.json");
    let report = ok(&splatdeform(
        dir.path(),
        &["deform", "-i", s(&scene), "--handles", s(&handles), "--weights", s(&weights), "--no-cache"],
    ));
    assert_eq!(report["method"], "bbw");
    assert!(report["bbw"]["max_row_sum_error"].as_f64().unwrap() <= 1e-6);

    let w: Value = serde_json::from_str(&std::fs::read_to_string(&weights).unwrap()).unwrap();
    let (n, h) = (w["n_points"].as_u64().unwrap() as usize, w["n_handles"].as_u64().unwrap() as usize);
    assert_eq!((n, h), (144, 2));
    let values = w["weights"].as_array().unwrap();
    for row in 0..n {
        let sum: f64 = (0..h).map(|k| values[row * h + k].as_f64().unwrap()).sum::<f64>() + w["rest"][row].as_f64().unwrap();
        assert!((sum - 1.0).abs() <= 1e-6, "row {row}: {sum}");
    }

    // arap has no weight field
    let out = splatdeform(
        dir.path(),
        &["deform", "-i", s(&scene), "--handles", s(&handles), "--method", "arap", "--weights", s(&weights), "--no-cache"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("weights"));
}

fn deform_outputs(dir: &Path, scene: &Path, handles: &Path, tag: &str, extra: &[&str]) -> (Vec<u8>, Vec<u8>) {
    let out = dir.join(format!("out-{tag}.ply"));
    let report = dir.join(format!("report-{tag}.json"));
    let base = ["deform", "-i", s(scene), "--handles", s(handles), "-o", s(&out), "--report", s(&report)];
    let args = [&base[..], extra].concat();
    ok(&splatdeform(dir, &args));
    (std::fs::read(out).unwrap(), std::fs::read(report).unwrap())
}

#[test]
fn outputs_are_byte_identical_across_runs_and_cache_states() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 15);
    let handles = write(dir.path(), "h.json", r#"{"handles":[{"index":112,"auto_pca":{"magnitude":0.2}}]}"#);
    let cache = dir.path().join("cache");
    let cached = ["--cache-dir", s(&cache)];
    let a = deform_outputs(dir.path(), &scene, &handles, "a", &cached);
    let b = deform_outputs(dir.path(), &scene, &handles, "b", &cached);
    let c = deform_outputs(dir.path(), &scene, &handles, "c", &["--no-cache"]);
    assert!(a == b, "reruns differ");
    assert!(a == c, "cached and uncached runs differ");
    let report: Value = serde_json::from_slice(&a.1).unwrap();
    assert!(report["max_displacement"].as_f64().unwrap() > 0.0);
}

#[test]
fn adapt_reproduces_deform_from_its_means() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 12);
    let handles = write(dir.path(), "h.json", r#"{"handles":[{"index":70,"displacement":[0,0,0.15]}]}"#);
    let (deformed, _) = deform_outputs(
        dir.path(),
        &scene,
        &handles,
        "d",
        &["--means", s(&dir.path().join("means.ply")), "--no-cache"],
    );
    let adapted = dir.path().join("adapted.ply");
    ok(&splatdeform(
        dir.path(),
        &["adapt", "-i", s(&scene), "--means", s(&dir.path().join("means.ply")), "-o", s(&adapted), "--no-cache"],
    ));
    let (a, _) = load_splats(&adapted, &FormatOptions::default()).unwrap();
    let b_path = dir.path().join("out-d.ply");
    assert_eq!(std::fs::read(&b_path).unwrap(), deformed);
    let (b, _) = load_splats(&b_path, &FormatOptions::default()).unwrap();
    for (x, y) in a.splats.iter().zip(&b.splats) {
        // the means file is single precision
        assert!((x.mean - y.mean).norm() < 1e-5);
    }
}

#[test]
fn eval_without_references_scores_itself() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 20);
    let handles = write(
        dir.path(),
        "h.json",
        r#"{"handles":[{"index":84,"auto_pca":{}},{"index":315,"auto_pca":{"magnitude":0.1}}]}"#,
    );
    let report = dir.path().join("pck.json");
    let out = splatdeform(
        dir.path(),
        &["eval", "-i", s(&scene), "--handles", s(&handles), "--report", s(&report), "--category", "sheet", "--no-cache"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("no reference clouds"));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("category") && table.contains("sheet") && table.contains("1.0000"), "{table}");

    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["handles"].as_array().unwrap().len(), 2);
    for v in r["categories"]["sheet"].as_array().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 1.0);
    }
}

#[test]
fn eval_checks_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sheet(dir.path(), 10);
    let handles = write(dir.path(), "h.json", r#"{"handles":[{"index":4,"auto_pca":{}}]}"#);
    let out = splatdeform(
        dir.path(),
        &["eval", "-i", s(&scene), "--handles", s(&handles), "--reference-rest", s(&scene), "--no-cache"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("reference_deformed"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let scene = three_disks(dir.path());
    let bad = write(dir.path(), "c.json", r#"{"engine":{"k_lap":5}}"#);
    let out = splatdeform(dir.path(), &["build-graph", "--config", s(&bad), "-i", s(&scene)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("k_lap"), "{}", stderr(&out));

    let out = splatdeform(dir.path(), &["build-graph", "-i", s(&scene), "--tol=-1"]);
    assert!(stderr(&out).contains("arap.tol"), "{}", stderr(&out));

    let out = splatdeform(dir.path(), &["build-graph"]);
    assert!(stderr(&out).contains("input"), "{}", stderr(&out));

    let handles = write(dir.path(), "h.json", r#"{"handles":[{"index":0,"displacement":[0,"up",0]}]}"#);
    let out = splatdeform(dir.path(), &["deform", "-i", s(&scene), "--handles", s(&handles), "--no-cache"]);
    assert!(stderr(&out).contains("handles[0].displacement[1]"), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let scene = three_disks(dir.path());
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input":{:?},"cache_dir":"from-file","engine":{{"epsilon_factor":0.0}}}}"#, s(&scene)),
    );
    ok(&splatdeform(dir.path(), &["build-graph", "--config", s(&cfg)]));
    graph_file(&dir.path().join("from-file"));
    ok(&splatdeform(dir.path(), &["build-graph", "--config", s(&cfg), "--cache-dir", "from-flag"]));
    graph_file(&dir.path().join("from-flag"));
}
