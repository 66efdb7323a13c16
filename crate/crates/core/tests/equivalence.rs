//! Reference engine versus the interpreted lowered program.

use cloudlift::isa::{interpret, parse_program, program_stats, GridImage, OpKind};
use cloudlift::lower::{lower_network, INPUT_NAME};
use cloudlift::model::{build_graph, forward, ModelConfig};
use cloudlift::train::init_params;
use cloudlift::verify::{run_both, run_trials, VerifyConfig, TOLERANCE};
use cloudlift::lower::Fault;
use cloudlift::Tensor;

#[test]
fn random_models_agree_at_every_depth() {
    let cfg = VerifyConfig {
        trials: 9,
        max_size: 40,
        seed: 1000,
        ..VerifyConfig::default()
    };
    let r = run_trials(&cfg, None).unwrap();
    assert!(r.passed(), "max_abs {} over {:?}", r.max_abs, r.failures().collect::<Vec<_>>());
    for d in 1..=3 {
        assert_eq!(r.trials.iter().filter(|t| t.depth == d).count(), 3);
    }
}

#[test]
fn trained_initialization_agrees_at_depth_four() {
    let mc = ModelConfig::with_depth(4);
    let p = init_params(&mc, 3).unwrap();
    let x = Tensor::from_fn(10, 32, 48, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 17.0).unwrap();
    let (a, b) = run_both(&mc, &p, &x, None).unwrap();
    assert!(a.max_abs_diff(&b) <= TOLERANCE, "{}", a.max_abs_diff(&b));
}

#[test]
fn swapped_concatenation_is_caught() {
    let cfg = VerifyConfig {
        trials: 3,
        max_size: 32,
        fault: Some(Fault::SwapConcat),
        ..VerifyConfig::default()
    };
    let r = run_trials(&cfg, None).unwrap();
    assert_eq!(r.failures().count(), 3);
    assert!(r.max_abs > 1e-2);
}

#[test]
fn program_text_round_trip_preserves_results() {
    let mc = ModelConfig {
        in_bands: 3,
        ..ModelConfig::with_depth(2)
    };
    let p = cloudlift::model::ParamSet::random(&mc, 9).unwrap();
    let g = build_graph(&mc).unwrap();
    let prog = lower_network(&g, &p).unwrap();
    let parsed = parse_program(&prog.to_text()).unwrap();
    assert_eq!(parsed, prog);
    let x = Tensor::from_fn(3, 16, 16, |c, y, x| (c + y * x) as f32 / 300.0).unwrap();
    let inputs = [(INPUT_NAME.to_string(), GridImage::from_tensor(&x, &[]).unwrap())].into();
    let a = interpret(&prog, &inputs).unwrap().to_tensor().unwrap();
    let b = interpret(&parsed, &inputs).unwrap().to_tensor().unwrap();
    assert_eq!(a, b);
    let reference = forward(&x, &g, &p).unwrap();
    assert!(reference.max_abs_diff(&a) <= TOLERANCE);
}

#[test]
fn instruction_inventory_matches_the_graph() {
    let mc = ModelConfig {
        in_bands: 2,
        ..ModelConfig::with_depth(1)
    };
    let g = build_graph(&mc).unwrap();
    let prog = lower_network(&g, &cloudlift::model::ParamSet::random(&mc, 1).unwrap()).unwrap();
    let s = program_stats(&prog).unwrap();
    // Kernel applications: down block (2*64 + 64*64), up block (128*64 + 64*64), head 64.
    let want = 2 * 64 + 64 * 64 + 128 * 64 + 64 * 64 + 64;
    assert_eq!(s.conv_applications, want);
    assert_eq!(s.count(OpKind::Conv2d), want);
    assert_eq!(s.count(OpKind::ReduceMax), 1);
    assert_eq!(s.count(OpKind::UpsampleNearest), 1);
}
