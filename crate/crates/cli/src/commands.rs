//! Subcommand implementations on top of the core library.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cloudlift::emit::{emit, lint_bundle, EmitOptions};
use cloudlift::isa::program_stats;
use cloudlift::lower::{lower_network_with, Fault, LowerOptions};
use cloudlift::metrics::{confusion, dilate_chebyshev, report, threshold};
use cloudlift::model::{build_graph, ModelConfig, ParamSet};
use cloudlift::params_io::{export_params, import_params, load_model, resolve_model, save_model};
use cloudlift::raster::{
    read_mask_pgm, read_raster, tiled_infer_with, write_mask_pgm, write_raster, Engine, RasterHeader, TileOptions,
    HEADER_SUFFIX, PROBABILITY_BAND,
};
use cloudlift::train::{init_params, synth_dataset, train, LabeledPatch, TrainConfig, BAND_NAMES};
use cloudlift::verify::{run_trials, VerifyConfig, TOLERANCE};
use cloudlift::Error;
use serde_json::json;

use crate::{
    Command, EmitArgs, EngineArg, ExportArgs, FaultArg, ImportArgs, InferArgs, InitArg, LowerArgs, MetricsArgs,
    SynthArgs, TrainArgs, VerifyArgs,
};

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass.
    Failed(String),
    /// Bad flags, malformed files or a model/data mismatch.
    Input(String),
    /// A file could not be read or written.
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Input(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) | CliError::Input(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("i/o error on {}: {e}", path.display()))
}

fn create_parent(path: &Path) -> CliResult {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// `<stem><suffix>` without treating dots in the stem as an extension.
fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Lower(a) => cmd_lower(a),
        Command::Verify(a) => cmd_verify(a),
        Command::EmitGee(a) => cmd_emit(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::ExportParams(a) => cmd_export(a),
        Command::ImportParams(a) => cmd_import(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

/// Pairs every `<name>.rst.json` in `dir` with `<name>.pgm`, sorted by name.
fn load_dataset(dir: &Path) -> CliResult<Vec<LabeledPatch>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if let Some(stem) = path.to_string_lossy().strip_suffix(HEADER_SUFFIX) {
            stems.push(PathBuf::from(stem));
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Input(format!("no *{HEADER_SUFFIX} rasters in {}", dir.display())));
    }
    stems
        .iter()
        .map(|stem| {
            let (_, bands) = read_raster(stem)?;
            let mask = read_mask_pgm(&with_suffix(stem, ".pgm"))?;
            Ok(LabeledPatch::new(bands, mask)?)
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let dataset = match (&a.data, a.synthetic) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(n)) => synth_dataset(n, a.patch, a.seed)?,
        (None, None) => return Err(CliError::Input("one of --synthetic or --data is required".into())),
    };
    if dataset.is_empty() {
        return Err(CliError::Input("the dataset is empty".into()));
    }
    let model = ModelConfig {
        in_bands: dataset[0].bands.channels(),
        ..ModelConfig::with_depth(a.depth)
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        patch_size: dataset[0].bands.height(),
        epochs: a.epochs,
        seed: a.seed,
        target_oa: a.target_oa,
        evaluate: a.evaluate,
        ..TrainConfig::default()
    };
    let mut log: Box<dyn Write> = match &a.log {
        Some(path) => {
            create_parent(path)?;
            Box::new(fs::File::create(path).map_err(|e| io_err(path, e))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut log_error = None;
    let outcome = train(&dataset, &model, &cfg, |rec| {
        if log_error.is_none() {
            let line = serde_json::to_string(rec).expect("epoch records serialize");
            log_error = writeln!(log, "{line}").and_then(|_| log.flush()).err();
        }
    })?;
    if let Some(e) = log_error {
        return Err(io_err(a.log.as_deref().unwrap_or(Path::new("<stdout>")), e));
    }
    let (manifest, table) = save_model(&a.out, &model, &outcome.params)?;
    let last = outcome.log.last();
    let final_oa = last.and_then(|r| r.eval_oa);
    print_json(&json!({
        "epochs": outcome.log.len(),
        "loss": last.map(|r| r.loss),
        "oa": last.map(|r| r.oa),
        "eval_oa": final_oa,
        "manifest": manifest.display().to_string(),
        "table": table.display().to_string(),
    }));
    match (a.target_oa, final_oa) {
        (Some(t), Some(oa)) if oa < t => Err(CliError::Failed(format!(
            "target accuracy {t} not reached after {} epochs (last {oa:.6})",
            outcome.log.len()
        ))),
        (Some(_), None) => Err(CliError::Failed("no epoch was run".into())),
        _ => Ok(()),
    }
}

fn cmd_infer(a: InferArgs) -> CliResult {
    if a.prob_out.is_none() && a.mask_out.is_none() {
        return Err(CliError::Input("nothing to write: give --prob-out and/or --mask-out".into()));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Input(format!("threshold {} is outside [0, 1]", a.threshold)));
    }
    let (cfg, params) = load_model(&a.model)?;
    let (_, raster) = read_raster(&a.input)?;
    let engine = match a.engine {
        EngineArg::Reference => Engine::Reference,
        EngineArg::Lowered => Engine::Lowered,
    };
    let prob = tiled_infer_with(&raster, &cfg, &params, &TileOptions::new(engine, a.tile))?;
    if let Some(path) = &a.prob_out {
        create_parent(path)?;
        let header = RasterHeader::for_tensor(&prob, &[PROBABILITY_BAND.to_string()]);
        write_raster(path, &header, &prob)?;
    }
    let mask = threshold(&prob, a.threshold)?;
    if let Some(path) = &a.mask_out {
        create_parent(path)?;
        write_mask_pgm(path, &mask)?;
    }
    print_json(&json!({
        "engine": engine.to_string(),
        "height": prob.height(),
        "width": prob.width(),
        "tile": a.tile,
        "cloud_pixels": mask.cloud_pixels(),
    }));
    Ok(())
}

fn cmd_lower(a: LowerArgs) -> CliResult {
    let (cfg, params) = load_model(&a.model)?;
    let g = build_graph(&cfg)?;
    let opts = LowerOptions {
        input_size: a.height.zip(a.width),
        fault: None,
    };
    let net = lower_network_with(&g, &params, &opts)?;
    let text = net.to_text();
    match &a.out {
        Some(path) => {
            write_file(path, &text)?;
            let stats = program_stats(&net.program).map_err(Error::from)?;
            let counts: BTreeMap<&str, usize> = stats.counts.iter().map(|(k, v)| (k.mnemonic(), *v)).collect();
            print_json(&json!({
                "depth": cfg.depth,
                "instructions": stats.instructions,
                "regions": net.regions.len(),
                "conv_applications": stats.conv_applications,
                "op_counts": counts,
                "out": path.display().to_string(),
            }));
        }
        None => {
            // A reader that stops early, such as `head`, is not an error.
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(CliError::Io(e.to_string())),
                _ => {}
            }
        }
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let cfg = VerifyConfig {
        trials: a.trials,
        depths: a.depths,
        seed: a.seed,
        in_bands: model.as_ref().map_or(a.bands, |(mc, _)| mc.in_bands),
        min_size: a.min_size,
        max_size: a.max_size,
        fault: a.fault.map(|f| match f {
            FaultArg::SwapConcat => Fault::SwapConcat,
        }),
    };
    let r = run_trials(&cfg, model.as_ref().map(|(mc, p)| (mc, p)))?;
    let failures: Vec<_> = r.failures().collect();
    for f in &failures {
        println!(
            "FAIL trial {} seed {} depth {} size {}x{} max_abs {:e}",
            f.trial, f.seed, f.depth, f.height, f.width, f.max_abs
        );
    }
    println!(
        "{} trials, {} failed, max_abs {:e}, tolerance {:e}",
        r.trials.len(),
        failures.len(),
        r.max_abs,
        TOLERANCE
    );
    match failures.first() {
        None => Ok(()),
        Some(f) => Err(CliError::Failed(format!(
            "lowered program disagrees with the reference engine (first failing seed {})",
            f.seed
        ))),
    }
}

fn cmd_emit(a: EmitArgs) -> CliResult {
    let (cfg, params) = load_model(&a.model)?;
    let g = build_graph(&cfg)?;
    let opts = EmitOptions {
        asset_prefix: a.asset_prefix,
        inline_threshold: (!a.inline_all).then_some(a.inline_threshold),
        band_names: a.bands,
    };
    let bundle = emit(&g, &params, &opts)?;
    let lint = lint_bundle(&bundle);
    let script_path = with_suffix(&a.out, ".gee.js");
    write_file(&script_path, &bundle.script)?;
    for t in &bundle.tables {
        write_file(&with_suffix(&a.out, &format!(".{}.csv", t.tensor)), &t.text)?;
    }
    let report = serde_json::to_string_pretty(&bundle.report).expect("emit reports serialize");
    write_file(&with_suffix(&a.out, ".report.json"), format!("{report}\n"))?;
    for issue in &lint.issues {
        println!("lint line {}: {}", issue.line, issue.message);
    }
    print_json(&json!({
        "script": script_path.display().to_string(),
        "tables": bundle.tables.len(),
        "inlined": bundle.report.inlined.len(),
        "lint_issues": lint.issues.len(),
    }));
    if lint.is_clean() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("emitted script has {} lint issues", lint.issues.len())))
    }
}

fn cmd_metrics(a: MetricsArgs) -> CliResult {
    let mut pred = read_mask_pgm(&a.pred)?;
    let reference = read_mask_pgm(&a.reference)?;
    if let Some(r) = a.dilate {
        pred = dilate_chebyshev(&pred, r);
    }
    let rep = report(&confusion(&pred, &reference)?)?;
    if a.json {
        print_json(&serde_json::to_value(rep).expect("metric reports serialize"));
    } else {
        print!("{rep}");
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CliResult {
    let (cfg, params) = match &a.model {
        Some(path) => load_model(path)?,
        None => {
            let cfg = ModelConfig {
                in_bands: a.bands.unwrap_or(BAND_NAMES.len()),
                ..ModelConfig::with_depth(a.depth.unwrap_or(ModelConfig::default().depth))
            };
            let params = match a.init.unwrap_or(InitArg::He) {
                InitArg::He => init_params(&cfg, a.seed)?,
                InitArg::Random => ParamSet::random(&cfg, a.seed)?,
            };
            (cfg, params)
        }
    };
    let (manifest, table) = save_model(&a.out, &cfg, &params)?;
    print_json(&json!({
        "depth": cfg.depth,
        "bands": cfg.in_bands,
        "tensors": params.to_flat().len(),
        "values": params.to_flat().iter().map(Vec::len).sum::<usize>(),
        "manifest": manifest.display().to_string(),
        "table": table.display().to_string(),
    }));
    Ok(())
}

fn cmd_import(a: ImportArgs) -> CliResult {
    let table_path = a.table.clone().unwrap_or_else(|| resolve_model(&a.manifest).1);
    let manifest = fs::read_to_string(&a.manifest).map_err(|e| io_err(&a.manifest, e))?;
    let table = fs::read_to_string(&table_path).map_err(|e| io_err(&table_path, e))?;
    let (cfg, params) = import_params(&manifest, &table)?;
    let flat = params.to_flat();
    let (_, canonical) = export_params(&params, &cfg)?;
    if let Some(out) = &a.out {
        save_model(out, &cfg, &params)?;
    }
    print_json(&json!({
        "depth": cfg.depth,
        "bands": cfg.in_bands,
        "tensors": flat.len(),
        "values": flat.iter().map(Vec::len).sum::<usize>(),
        "canonical": canonical == table,
    }));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let patches = synth_dataset(a.count, a.patch, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let names: Vec<String> = BAND_NAMES.iter().map(|s| s.to_string()).collect();
    for (i, p) in patches.iter().enumerate() {
        let stem = a.out.join(format!("patch_{i:03}"));
        write_raster(&stem, &RasterHeader::for_tensor(&p.bands, &names), &p.bands)?;
        write_mask_pgm(&with_suffix(&stem, ".pgm"), &p.mask)?;
    }
    print_json(&json!({
        "count": patches.len(),
        "patch": a.patch,
        "out": a.out.display().to_string(),
    }));
    Ok(())
}
