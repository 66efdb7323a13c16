use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 9] = [
    "train",
    "infer",
    "lower",
    "verify",
    "emit-gee",
    "metrics",
    "export-params",
    "import-params",
    "synth-data",
];

fn cloudlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudlift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Compares against a file under tests/golden, rewriting it when UPDATE_GOLDEN is set.
fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "output differs from {}", path.display());
}

#[test]
fn help_lists_every_subcommand_and_matches_golden() {
    let o = cloudlift(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for s in SUBCOMMANDS {
        assert!(text.contains(&format!("  {s} ")), "{s} missing from help");
    }
    let mut all = text.clone();
    for s in SUBCOMMANDS {
        let o = cloudlift(&[s, "--help"]);
        assert_eq!(code(&o), 0, "{s} --help");
        all.push_str(&format!("\n===== {s} =====\n{}", stdout(&o)));
    }
    check_golden("help.txt", &all);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cloudlift(&[])), 2);
    assert_eq!(code(&cloudlift(&["frobnicate"])), 2);
    assert_eq!(code(&cloudlift(&["verify", "--trials", "many"])), 2);
    assert_eq!(code(&cloudlift(&["verify", "--trials", "0"])), 2);
    assert_eq!(code(&cloudlift(&["export-params", "--depth", "9", "--out", "/tmp/never"])), 2);
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("absent");
    let o = cloudlift(&["lower", "--model", p(&model)]);
    assert_eq!(code(&o), 3);
    let a = dir.path().join("a.pgm");
    let o = cloudlift(&["metrics", "--pred", p(&a), "--ref", p(&a)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_passes_and_fault_fails_with_seed() {
    let ok = cloudlift(&["verify", "--trials", "2", "--depths", "1", "--bands", "3", "--max-size", "24"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("2 trials, 0 failed"));
    let bad = cloudlift(&[
        "verify", "--trials", "2", "--depths", "1", "--bands", "3", "--max-size", "24", "--seed", "5", "--fault",
        "swap-concat",
    ]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL trial 0 seed 5"));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("seed 5"));
}

#[test]
fn synth_train_infer_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cloudlift(&["synth-data", "--count", "2", "--patch", "16", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0);
    assert!(data.join("patch_001.rst.json").exists());
    assert!(data.join("patch_001.rst.bin").exists());
    assert!(data.join("patch_001.pgm").exists());

    let stem = dir.path().join("model");
    let log = dir.path().join("log.jsonl");
    let o = cloudlift(&[
        "train", "--data", p(&data), "--depth", "1", "--epochs", "2", "--batch", "2", "--out", p(&stem), "--log",
        p(&log), "--evaluate",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert!(lines[1]["eval_oa"].is_number());

    let input = data.join("patch_000");
    let (whole, tiled) = (dir.path().join("whole"), dir.path().join("tiled"));
    for (out, extra) in [(&whole, vec![]), (&tiled, vec!["--tile", "12", "--engine", "lowered"])] {
        let mask = format!("{}.pgm", p(out));
        let mut args = vec!["infer", "--model", p(&stem), "--input", p(&input), "--prob-out", p(out), "--mask-out"];
        args.push(&mask);
        args.extend(extra);
        let o = cloudlift(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("whole.rst.bin")).unwrap();
    let b = fs::read(dir.path().join("tiled.rst.bin")).unwrap();
    assert_eq!(a.len(), 16 * 16 * 4);
    let max_abs = a
        .chunks(4)
        .zip(b.chunks(4))
        .map(|(x, y)| {
            let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap());
            (f(x) - f(y)).abs()
        })
        .fold(0.0f32, f32::max);
    assert!(max_abs <= 1e-6, "tiled lowered differs from whole reference by {max_abs}");
    let header = fs::read_to_string(dir.path().join("whole.rst.json")).unwrap();
    assert!(header.contains("cloud_probability"));

    let o = cloudlift(&["metrics", "--pred", &format!("{}.pgm", p(&whole)), "--ref", p(&data.join("patch_000.pgm"))]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for key in ["oa:", "commission:", "omission:", "miou:", "# fp / (tp + fp)"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let o = cloudlift(&["metrics", "--json", "--dilate", "1", "--pred", p(&data.join("patch_001.pgm")), "--ref", p(&data.join("patch_001.pgm"))]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["omission"], 0.0);
}

#[test]
fn infer_rejects_band_mismatch_and_missing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("m");
    let o = cloudlift(&["export-params", "--depth", "1", "--bands", "3", "--out", p(&stem)]);
    assert_eq!(code(&o), 0);
    let data = dir.path().join("d");
    assert_eq!(code(&cloudlift(&["synth-data", "--count", "1", "--patch", "8", "--out", p(&data)])), 0);
    let input = data.join("patch_000.rst.json");
    let mask = dir.path().join("x.pgm");
    let o = cloudlift(&["infer", "--model", p(&stem), "--input", p(&input), "--mask-out", p(&mask)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("band"));
    let o = cloudlift(&["infer", "--model", p(&stem), "--input", p(&input)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_import_and_emit() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&cloudlift(&["export-params", "--depth", "1", "--init", "random", "--seed", "4", "--out", p(&a)])), 0);
    let manifest = format!("{}.manifest.json", p(&a));
    let o = cloudlift(&["import-params", "--manifest", &manifest, "--out", p(&b)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"canonical\":true"));
    for suffix in [".manifest.json", ".params.csv"] {
        let x = fs::read(format!("{}{suffix}", p(&a))).unwrap();
        let y = fs::read(format!("{}{suffix}", p(&b))).unwrap();
        assert_eq!(x, y, "{suffix} differs after import and re-export");
    }

    let table = format!("{}.params.csv", p(&a));
    let mut text = fs::read_to_string(&table).unwrap();
    text.push_str("head.bias,0,0\n");
    fs::write(&table, text).unwrap();
    let o = cloudlift(&["import-params", "--manifest", &manifest]);
    assert_eq!(code(&o), 2);

    let out = dir.path().join("gee/model");
    let o = cloudlift(&["emit-gee", "--model", p(&b), "--out", p(&out), "--asset-prefix", "users/me/clouds"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let script = fs::read_to_string(dir.path().join("gee/model.gee.js")).unwrap();
    assert!(script.contains("users/me/clouds/head_weight"));
    assert!(dir.path().join("gee/model.head.weight.csv").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gee/model.report.json")).unwrap()).unwrap();
    let helpers = report["helpers"].as_array().unwrap();
    assert_eq!(helpers.len(), 11);
    assert_eq!(helpers.last().unwrap(), "classify");

    let o = cloudlift(&["emit-gee", "--model", p(&b), "--out", p(&out), "--inline-all"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"tables\":0"));
    let o = cloudlift(&["emit-gee", "--model", p(&b), "--out", p(&out), "--inline-all", "--bands", "a,b"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lower_prints_program_text() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("m");
    assert_eq!(code(&cloudlift(&["export-params", "--depth", "1", "--bands", "2", "--out", p(&stem)])), 0);
    let o = cloudlift(&["lower", "--model", p(&stem)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("# region head head"));
    let out = dir.path().join("prog.txt");
    let o = cloudlift(&["lower", "--model", p(&stem), "--out", p(&out), "--height", "16", "--width", "16"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), text);
    let o = cloudlift(&["lower", "--model", p(&stem), "--height", "15", "--width", "16"]);
    assert_eq!(code(&o), 2);
}
