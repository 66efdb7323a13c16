//! Earth Engine script emission.

mod common;

use std::fs;

use cloudlift::emit::{emit, lint_bundle, lint_script, recover_params, snapshot, EmitOptions};
use cloudlift::isa::program_stats;
use cloudlift::lower::lower_network;
use cloudlift::model::{build_graph, ModelConfig, ParamSet};
use cloudlift::params_io::{parse_table, tensors_from_rows};
use common::{golden_path, tiny_bundle, GOLDEN_SNAPSHOT};

fn bits(p: &ParamSet) -> Vec<u32> {
    p.to_flat().iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn tiny_model_matches_golden_snapshot() {
    let b = tiny_bundle();
    assert!(b.tables.is_empty());
    let snap = snapshot(&b);
    let path = golden_path(GOLDEN_SNAPSHOT);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, &snap).unwrap();
    }
    let want = fs::read_to_string(&path).expect("golden snapshot present");
    assert_eq!(snap, want, "emitted script changed; rerun with UPDATE_GOLDEN=1 after review");
}

#[test]
fn emission_is_lint_clean_deterministic_and_lossless() {
    let cfg = ModelConfig {
        in_bands: 4,
        ..ModelConfig::with_depth(2)
    };
    let p = ParamSet::random(&cfg, 6).unwrap();
    let g = build_graph(&cfg).unwrap();
    let opts = EmitOptions {
        asset_prefix: Some("users/someone/cloudnet".into()),
        band_names: vec!["B2".into(), "B3".into(), "B4".into(), "B5".into()],
        ..EmitOptions::default()
    };
    let b = emit(&g, &p, &opts).unwrap();
    let lint = lint_bundle(&b);
    assert!(lint.is_clean(), "{:?}", lint.issues);
    assert_eq!(emit(&g, &p, &opts).unwrap(), b);
    assert!(!b.tables.is_empty());
    assert_eq!(bits(&recover_params(&b, &g).unwrap()), bits(&p));

    let specs = ParamSet::registry(&cfg).unwrap();
    let flat = p.to_flat();
    for t in &b.tables {
        let i = specs.iter().position(|s| s.name == t.tensor).unwrap();
        let rows = parse_table(&t.text).unwrap();
        let got = tensors_from_rows(&specs[i..=i], &rows).unwrap();
        let want: Vec<u32> = flat[i].iter().map(|v| v.to_bits()).collect();
        assert_eq!(got[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want, "{}", t.tensor);
    }
    let stats = program_stats(&lower_network(&g, &p).unwrap()).unwrap();
    assert_eq!(b.report.conv_applications, stats.conv_applications);
    assert_eq!(b.report.instructions, stats.instructions);
    assert!(b.script.contains("var BANDS = ['B2', 'B3', 'B4', 'B5'];"));
}

#[test]
fn corruptions_fail_lint() {
    let b = tiny_bundle();
    let at = b.script.rfind('}').unwrap();
    let mut broken = b.script.clone();
    broken.remove(at);
    assert!(!lint_script(&broken).is_clean());
    let with_eval = b.script.replacen("return", "eval(1); return", 1);
    assert!(!lint_script(&with_eval).is_clean());
}

#[test]
fn large_tensors_demand_an_asset_prefix() {
    let cfg = ModelConfig::with_depth(1);
    let g = build_graph(&cfg).unwrap();
    let r = emit(&g, &ParamSet::random(&cfg, 0).unwrap(), &EmitOptions::default());
    assert!(matches!(r, Err(cloudlift::Error::Config(_))));
}
