//! Earth Engine client script generation.
//!
//! The script is produced from the lowered program, not from the graph. The
//! program is first decoded region by region into helper calls, and each
//! constant it uses is checked against the parameter tensors the script reads.
//! Only then is text written: one statement per region in the main assembly,
//! plus a fixed set of helpers that perform exactly the decoded sequences.
//!
//! Parameter tensors with at most `inline_threshold` values become array
//! literals in the script. Larger ones become per-tensor tables in the
//! parameter table format, read through `tableValues('<asset id>')`.

mod decode;
mod lint;

pub use lint::{lint_bundle, lint_script, LintIssue, LintReport};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decimal::format_f32;
use crate::error::{Error, Result};
use crate::isa::program_stats;
use crate::layers::BELOW_ONE;
use crate::lower::{lower_network_with, LowerOptions, LOGIT_FLOOR};
use crate::model::{GraphSpec, ParamSet};
use crate::params_io::{parse_table, tensors_from_rows, write_table};
use crate::raster::PROBABILITY_BAND;
use decode::{check_against_params, decode, CallKind};

/// Default largest tensor, in values, that is inlined into the script.
pub const DEFAULT_INLINE_THRESHOLD: usize = 512;
/// Values per line inside inlined array literals.
const VALUES_PER_LINE: usize = 8;

/// Helper functions in definition order. `tableValues` is left out of scripts
/// that inline every tensor.
pub const HELPERS: [&str; 10] = [
    "tableValues",
    "at",
    "makeKernel",
    "pairwiseSum",
    "conv",
    "convBnPrelu",
    "tcbp",
    "maxPool",
    "upSample",
    "head",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmitOptions {
    /// Asset path stem for uploaded tables, e.g. `users/me/cloud`.
    pub asset_prefix: Option<String>,
    /// Tensors with at most this many values are inlined; `None` inlines everything.
    pub inline_threshold: Option<usize>,
    /// Input band names; empty means `b0, b1, ...`.
    pub band_names: Vec<String>,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            asset_prefix: None,
            inline_threshold: Some(DEFAULT_INLINE_THRESHOLD),
            band_names: Vec::new(),
        }
    }
}

/// One uploaded parameter table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedTable {
    pub tensor: String,
    pub asset_id: String,
    /// Parameter table text holding only this tensor.
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitReport {
    /// Helper functions defined by the script, in definition order.
    pub helpers: Vec<String>,
    /// Calls per helper in the main assembly.
    pub calls: BTreeMap<String, usize>,
    pub instructions: usize,
    /// Program instruction counts by mnemonic.
    pub op_counts: BTreeMap<String, usize>,
    /// Single-band kernel applications performed by the script.
    pub conv_applications: usize,
    pub inlined: Vec<String>,
    pub assets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedBundle {
    pub script: String,
    pub tables: Vec<EmittedTable>,
    pub report: EmitReport,
}

fn check_identifier(kind: &str, s: &str, extra: &[char]) -> Result<()> {
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || extra.contains(&c)) {
        return Err(Error::config(format!(
            "{kind} {s:?} may only contain ASCII letters, digits, '_' and {extra:?}"
        )));
    }
    Ok(())
}

/// Asset id of `tensor` under `prefix`; dots become underscores.
pub fn asset_id(prefix: &str, tensor: &str) -> String {
    format!("{}/{}", prefix.trim_end_matches('/'), tensor.replace('.', "_"))
}

fn var_name(region: &str) -> String {
    region.replace('.', "_")
}

fn push_array(out: &mut String, values: &[f32]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        out.push_str(if i % VALUES_PER_LINE == 0 { "\n  " } else { " " });
        out.push_str(&format_f32(*v));
        if i + 1 < values.len() {
            out.push(',');
        }
    }
    out.push_str("\n]");
}

/// Only emitted when at least one tensor is read from a table.
const TABLE_HELPER_SOURCE: &str = r#"// Values of an uploaded parameter table (columns tensor_name, flat_index,
// value) in flat index order.
function tableValues(assetId) {
  return ee.FeatureCollection(assetId).sort('flat_index').aggregate_array('value');
}

"#;

const HELPER_SOURCE: &str = r#"// Value i of a flat parameter tensor.
function at(values, i) {
  return ee.Number(ee.List(values).get(i));
}

// KERNEL_SIZE x KERNEL_SIZE kernel from consecutive row-major values
// starting at offset, centred, not normalized.
function makeKernel(values, offset) {
  var list = ee.List(values);
  var rows = [];
  for (var r = 0; r < KERNEL_SIZE; r++) {
    rows.push(list.slice(offset + r * KERNEL_SIZE, offset + (r + 1) * KERNEL_SIZE));
  }
  return ee.Kernel.fixed(KERNEL_SIZE, KERNEL_SIZE, rows, -1, -1, false);
}

// Sum of images, adding neighbours level by level; an odd last term passes
// up unchanged.
function pairwiseSum(terms) {
  while (terms.length > 1) {
    var next = [];
    for (var i = 0; i + 1 < terms.length; i += 2) {
      next.push(terms[i].add(terms[i + 1]));
    }
    if (terms.length % 2 == 1) {
      next.push(terms[terms.length - 1]);
    }
    terms = next;
  }
  return terms[0];
}

// Same-size convolution. Output band o is the pairwise sum over input bands
// i of band i convolved with kernel (o, i), plus bias o when a bias is given.
function conv(x, weights, inBands, outBands, bias) {
  var kk = KERNEL_SIZE * KERNEL_SIZE;
  var bands = [];
  for (var i = 0; i < inBands; i++) {
    bands.push(x.select([i]));
  }
  var outs = [];
  for (var o = 0; o < outBands; o++) {
    var terms = [];
    for (var j = 0; j < inBands; j++) {
      terms.push(bands[j].convolve(makeKernel(weights, (o * inBands + j) * kk)));
    }
    var acc = pairwiseSum(terms);
    if (bias !== null) {
      acc = acc.add(at(bias, o));
    }
    outs.push(acc.rename('c' + o));
  }
  return ee.Image.cat(outs);
}

// Convolution, inference-mode batch norm with running statistics, and PReLU
// (max(v, 0) + slope * min(v, 0)) for one unit of a block.
function convBnPrelu(x, block, unit, inBands) {
  var name = block + '.';
  var z = conv(x, P[name + 'conv' + unit + '.weight'], inBands, WIDTH, null);
  var gamma = P[name + 'bn' + unit + '.gamma'];
  var beta = P[name + 'bn' + unit + '.beta'];
  var mean = P[name + 'bn' + unit + '.running_mean'];
  var variance = P[name + 'bn' + unit + '.running_var'];
  var slope = P[name + 'prelu' + unit + '.slope'];
  var normed = [];
  for (var c = 0; c < WIDTH; c++) {
    var d = at(variance, c).add(BN_EPS).sqrt();
    normed.push(z.select([c]).subtract(at(mean, c)).divide(d)
        .multiply(at(gamma, c)).add(at(beta, c)).rename('c' + c));
  }
  var y = ee.Image.cat(normed);
  var outs = [];
  for (var k = 0; k < WIDTH; k++) {
    var v = y.select([k]);
    outs.push(v.max(0).add(v.min(0).multiply(at(slope, k))).rename('c' + k));
  }
  return ee.Image.cat(outs);
}

// One block: two convolution, batch norm and PReLU units.
function tcbp(x, block, inBands) {
  return convBnPrelu(convBnPrelu(x, block, 1, inBands), block, 2, WIDTH);
}

// 2x2 block maximum, halving the pixel grid.
function maxPool(x) {
  var proj = x.projection();
  return x.reduceResolution({reducer: ee.Reducer.max(), maxPixels: 4}).reproject(proj.scale(2, 2));
}

// 2x2 nearest-neighbour replication, doubling the pixel grid.
function upSample(x) {
  return x.reproject(x.projection().scale(0.5, 0.5));
}

// Single-filter convolution with bias, then the logistic function with the
// logit floored at LOGIT_FLOOR and the result capped at BELOW_ONE.
function head(x, inBands) {
  var logit = conv(x, P['head.weight'], inBands, 1, P['head.bias']);
  var e = logit.max(LOGIT_FLOOR).multiply(-1).exp();
  return ee.Image(1).divide(e.add(1)).min(BELOW_ONE).rename('PROBABILITY_BAND');
}
"#;

/// Generates the script and parameter tables for `(g, p)`.
pub fn emit(g: &GraphSpec, p: &ParamSet, opts: &EmitOptions) -> Result<EmittedBundle> {
    let cfg = g.config();
    let net = lower_network_with(g, p, &LowerOptions::default())?;
    let stats = program_stats(&net.program)?;
    let calls = decode(&net, cfg)?;
    check_against_params(&calls, cfg, p)?;

    let bands: Vec<String> = if opts.band_names.is_empty() {
        (0..cfg.in_bands).map(|i| format!("b{i}")).collect()
    } else {
        opts.band_names.clone()
    };
    if bands.len() != cfg.in_bands {
        return Err(Error::config(format!(
            "{} band names for a {}-band model",
            bands.len(),
            cfg.in_bands
        )));
    }
    for b in &bands {
        check_identifier("band name", b, &[])?;
    }

    let specs = ParamSet::registry(cfg)?;
    let flat = p.to_flat();
    let threshold = opts.inline_threshold.unwrap_or(usize::MAX);
    let needs_assets = specs.iter().any(|s| s.len() > threshold);
    let prefix = match opts.asset_prefix.as_deref() {
        Some(pre) if !pre.trim_end_matches('/').is_empty() => {
            check_identifier("asset prefix", pre, &['/', '-'])?;
            pre
        }
        _ if needs_assets => {
            return Err(Error::config(
                "an asset prefix is required when tensors exceed the inline threshold",
            ))
        }
        _ => "",
    };

    let mut tables = Vec::new();
    let mut inlined = Vec::new();
    let mut params = String::from("// Flat row-major parameter tensors, keyed by name.\nvar P = {};\n");
    for (s, values) in specs.iter().zip(&flat) {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: s.name.clone(),
                index: i,
            });
        }
        if s.len() <= threshold {
            write!(params, "P['{}'] = ", s.name).unwrap();
            push_array(&mut params, values);
            params.push_str(";\n");
            inlined.push(s.name.clone());
        } else {
            let id = asset_id(prefix, &s.name);
            writeln!(params, "P['{}'] = tableValues('{id}');", s.name).unwrap();
            let text = write_table(values.iter().enumerate().map(|(i, &v)| (s.name.as_str(), i, v)));
            tables.push(EmittedTable {
                tensor: s.name.clone(),
                asset_id: id,
                text,
            });
        }
    }

    let mut main = String::from("// Main assembly, one statement per program region.\nfunction classify(image) {\n");
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut call_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut conv_applications = 0;
    for c in &calls {
        let var = var_name(&c.name);
        let arg = |i: usize| names[&c.inputs[i]].clone();
        let (helper, expr) = match &c.kind {
            CallKind::Input { .. } => ("select", "image.select(BANDS)".to_string()),
            CallKind::Tcbp(units) => {
                conv_applications += units.iter().map(|u| u.conv.in_bands * u.conv.out_bands).sum::<usize>();
                ("tcbp", format!("tcbp({}, '{}', {})", arg(0), c.name, units[0].conv.in_bands))
            }
            CallKind::MaxPool => ("maxPool", format!("maxPool({})", arg(0))),
            CallKind::Upsample => ("upSample", format!("upSample({})", arg(0))),
            CallKind::Concat => {
                let parts: Vec<String> = (0..c.inputs.len()).map(arg).collect();
                ("cat", format!("ee.Image.cat([{}])", parts.join(", ")))
            }
            CallKind::Head(conv) => {
                conv_applications += conv.in_bands * conv.out_bands;
                ("head", format!("head({}, {})", arg(0), conv.in_bands))
            }
        };
        *call_counts.entry(helper.to_string()).or_default() += 1;
        if c.output == net.program.output {
            writeln!(main, "  return {expr};").unwrap();
        } else {
            writeln!(main, "  var {var} = {expr};").unwrap();
        }
        names.insert(c.output, var);
    }
    main.push_str("}\n");
    if conv_applications != stats.conv_applications {
        return Err(Error::Lowering(format!(
            "the script performs {conv_applications} kernel applications, the program {}",
            stats.conv_applications
        )));
    }

    let mut script = String::new();
    writeln!(
        script,
        "// Cloud probability for a {}-band image from a depth-{} network.",
        cfg.in_bands, cfg.depth
    )
    .unwrap();
    writeln!(
        script,
        "// Generated from a validated lowered program of {} instructions and {} kernel\n// applications; each helper replays the instructions of its program region.",
        stats.instructions, stats.conv_applications
    )
    .unwrap();
    script.push_str("// Usage: var probability = classify(image); with image carrying BANDS.\n\n");
    let quoted: Vec<String> = bands.iter().map(|b| format!("'{b}'")).collect();
    writeln!(script, "var BANDS = [{}];", quoted.join(", ")).unwrap();
    writeln!(script, "var WIDTH = {};", cfg.width).unwrap();
    writeln!(script, "var KERNEL_SIZE = {};", cfg.kernel_size).unwrap();
    writeln!(script, "var BN_EPS = {};", format_f32(cfg.bn_eps)).unwrap();
    writeln!(script, "var LOGIT_FLOOR = {};", format_f32(LOGIT_FLOOR)).unwrap();
    writeln!(script, "var BELOW_ONE = {};", format_f32(BELOW_ONE)).unwrap();
    script.push_str("\n// Uploaded parameter tables, one per tensor.\nvar ASSETS = [");
    for (i, t) in tables.iter().enumerate() {
        write!(script, "\n  '{}'{}", t.asset_id, if i + 1 < tables.len() { "," } else { "\n" }).unwrap();
    }
    script.push_str("];\n\n");
    if !tables.is_empty() {
        script.push_str(TABLE_HELPER_SOURCE);
    }
    script.push_str(&HELPER_SOURCE.replace("PROBABILITY_BAND", PROBABILITY_BAND));
    script.push('\n');
    script.push_str(&params);
    script.push('\n');
    script.push_str(&main);
    script.push_str("\nexports.classify = classify;\n");

    let report = EmitReport {
        helpers: HELPERS
            .iter()
            .filter(|h| !tables.is_empty() || **h != "tableValues")
            .map(|s| s.to_string())
            .chain(["classify".to_string()])
            .collect(),
        calls: call_counts,
        instructions: stats.instructions,
        op_counts: stats
            .counts
            .iter()
            .map(|(k, v)| (k.mnemonic().to_string(), *v))
            .collect(),
        conv_applications,
        inlined,
        assets: tables.iter().map(|t| t.asset_id.clone()).collect(),
    };
    Ok(EmittedBundle {
        script,
        tables,
        report,
    })
}

/// The script with inlined array contents elided, for reviewable snapshots.
pub fn skeleton(script: &str) -> String {
    let mut out = String::new();
    let mut in_array: Option<(String, usize)> = None;
    for line in script.lines() {
        if let Some((head, count)) = &mut in_array {
            if line == "];" {
                writeln!(out, "{head}[/* {count} values */];").unwrap();
                in_array = None;
            } else {
                *count += line.split(',').filter(|s| !s.trim().is_empty()).count();
            }
            continue;
        }
        match line.strip_suffix('[') {
            Some(head) if line.starts_with("P['") => in_array = Some((head.to_string(), 0)),
            _ => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

/// `sha256:<hex>` of the script bytes.
pub fn script_digest(script: &str) -> String {
    let hex: String = Sha256::digest(script.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Skeleton plus digest of the full script, the form kept as a golden snapshot.
pub fn snapshot(bundle: &EmittedBundle) -> String {
    format!("{}# digest {}\n", skeleton(&bundle.script), script_digest(&bundle.script))
}

/// Rebuilds the parameter set from the script's literals and the tables.
pub fn recover_params(bundle: &EmittedBundle, g: &GraphSpec) -> Result<ParamSet> {
    let cfg = g.config();
    let specs = ParamSet::registry(cfg)?;
    let mut rows = Vec::new();
    let mut current: Option<(String, usize)> = None;
    let bad = |line: usize, m: String| Error::config(format!("script line {line}: {m}"));
    for (n, line) in bundle.script.lines().enumerate() {
        if let Some((name, index)) = &mut current {
            if line == "];" {
                current = None;
                continue;
            }
            for tok in line.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let value = crate::decimal::parse_f32(tok).ok_or_else(|| bad(n + 1, format!("bad number {tok}")))?;
                rows.push((
                    n + 1,
                    crate::params_io::ParamTableRow {
                        tensor_name: name.clone(),
                        flat_index: *index,
                        value,
                    },
                ));
                *index += 1;
            }
        } else if let Some(rest) = line.strip_prefix("P['") {
            if let Some(name) = rest.strip_suffix("'] = [") {
                current = Some((name.to_string(), 0));
            }
        }
    }
    for t in &bundle.tables {
        rows.extend(parse_table(&t.text)?);
    }
    let flat = tensors_from_rows(&specs, &rows)?;
    ParamSet::from_flat(cfg, flat)
}
