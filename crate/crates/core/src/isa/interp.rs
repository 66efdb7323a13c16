use std::collections::BTreeMap;
use std::sync::Arc;

use crate::isa::{validate, Band, BinaryKind, GridImage, IsaError, Op, Program, UnaryKind, ValueId};
use crate::tensor::Kernel2D;

type Plane = Arc<Vec<f32>>;

/// Runtime value: bands share storage so SELECT and CAT never copy pixels.
#[derive(Clone)]
struct Value {
    height: usize,
    width: usize,
    bands: Vec<Plane>,
}

/// One output pixel: in-bounds taps accumulated in f64, row-major tap order.
fn conv_pixel(src: &[f32], h: usize, w: usize, k: &Kernel2D, y: usize, x: usize) -> f32 {
    let (r, size) = (k.radius(), k.size());
    // Tap ranges whose source pixel lies inside the grid.
    let (ky0, ky1) = (r.saturating_sub(y), size.min(h + r - y));
    let (kx0, kx1) = (r.saturating_sub(x), size.min(w + r - x));
    let mut acc = 0.0f64;
    for ky in ky0..ky1 {
        let srow = &src[(y + ky - r) * w..];
        let krow = &k.weights()[ky * size..(ky + 1) * size];
        for kx in kx0..kx1 {
            acc += krow[kx] as f64 * srow[x + kx - r] as f64;
        }
    }
    acc as f32
}

/// Pixels accumulated together in the 3x3 fast path.
const LANES: usize = 8;

/// Same-size zero-padded correlation of one band. Every pixel sums its
/// in-bounds taps in row-major order, so the 3x3 fast path over interior
/// pixels and the generic per-pixel path give identical bits.
fn conv_plane(src: &[f32], h: usize, w: usize, k: &Kernel2D) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, the only feature the clone enables.
        return unsafe { conv_plane_avx2(src, h, w, k) };
    }
    conv_plane_portable(src, h, w, k)
}

/// The portable body compiled with wider vectors. Only AVX2 is enabled, not
/// FMA, so every multiply and add rounds exactly as in the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_plane_avx2(src: &[f32], h: usize, w: usize, k: &Kernel2D) -> Vec<f32> {
    conv_plane_portable(src, h, w, k)
}

#[inline(always)]
fn conv_plane_portable(src: &[f32], h: usize, w: usize, k: &Kernel2D) -> Vec<f32> {
    if k.size() != 3 || h < 3 || w < 3 {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            out.extend((0..w).map(|x| conv_pixel(src, h, w, k, y, x)));
        }
        return out;
    }
    let kw: [f64; 9] = std::array::from_fn(|i| k.weights()[i] as f64);
    let n = w - 2;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        // (weight, source run) for every in-bounds tap of the interior
        // pixels 1..w-1 of this row, in row-major tap order.
        let mut weights = [0.0f64; 9];
        let mut taps: [&[f32]; 9] = [&[]; 9];
        let mut count = 0;
        // The edge pixels lack the left or the right tap column.
        let (mut left, mut right) = (0.0f64, 0.0f64);
        for ky in 0..3 {
            let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
                continue;
            };
            let srow = &src[sy * w..(sy + 1) * w];
            for kx in 0..3 {
                weights[count] = kw[ky * 3 + kx];
                taps[count] = &srow[kx..kx + n];
                count += 1;
            }
            left += kw[ky * 3 + 1] * srow[0] as f64;
            left += kw[ky * 3 + 2] * srow[1] as f64;
            right += kw[ky * 3] * srow[w - 2] as f64;
            right += kw[ky * 3 + 1] * srow[w - 1] as f64;
        }
        let (weights, taps) = (&weights[..count], &taps[..count]);
        let row = &mut out[y * w..(y + 1) * w];
        row[0] = left as f32;
        row[w - 1] = right as f32;
        let inner = &mut row[1..n + 1];
        let mut i = 0;
        while i + LANES <= n {
            let mut acc = [0.0f64; LANES];
            for (wt, tap) in weights.iter().zip(taps) {
                let s: &[f32; LANES] = tap[i..i + LANES].try_into().expect("lane-sized slice");
                for l in 0..LANES {
                    acc[l] += wt * s[l] as f64;
                }
            }
            for l in 0..LANES {
                inner[i + l] = acc[l] as f32;
            }
            i += LANES;
        }
        for j in i..n {
            let mut acc = 0.0f64;
            for (wt, tap) in weights.iter().zip(taps) {
                acc += wt * tap[j] as f64;
            }
            inner[j] = acc as f32;
        }
    }
    out
}

/// Element-wise map with the operation fixed per call, so each kind gets its
/// own tight loop.
fn map_binary(kind: BinaryKind, p: &[f32], q: &[f32]) -> Vec<f32> {
    fn run(p: &[f32], q: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        p.iter().zip(q).map(|(&x, &y)| f(x, y)).collect()
    }
    match kind {
        BinaryKind::Add => run(p, q, |x, y| BinaryKind::Add.apply(x, y)),
        BinaryKind::Sub => run(p, q, |x, y| BinaryKind::Sub.apply(x, y)),
        BinaryKind::Mul => run(p, q, |x, y| BinaryKind::Mul.apply(x, y)),
        BinaryKind::Div => run(p, q, |x, y| BinaryKind::Div.apply(x, y)),
        BinaryKind::Min => run(p, q, |x, y| BinaryKind::Min.apply(x, y)),
        BinaryKind::Max => run(p, q, |x, y| BinaryKind::Max.apply(x, y)),
    }
}

fn map_unary(kind: UnaryKind, p: &[f32]) -> Vec<f32> {
    fn run(p: &[f32], f: impl Fn(f32) -> f32) -> Vec<f32> {
        p.iter().map(|&x| f(x)).collect()
    }
    match kind {
        UnaryKind::Exp => run(p, |x| UnaryKind::Exp.apply(x)),
        UnaryKind::Sqrt => run(p, |x| UnaryKind::Sqrt.apply(x)),
        UnaryKind::Neg => run(p, |x| UnaryKind::Neg.apply(x)),
        UnaryKind::Recip => run(p, |x| UnaryKind::Recip.apply(x)),
        UnaryKind::MaxZero => run(p, |x| UnaryKind::MaxZero.apply(x)),
        UnaryKind::MinZero => run(p, |x| UnaryKind::MinZero.apply(x)),
    }
}

fn map_scalar(kind: BinaryKind, p: &[f32], s: f32) -> Vec<f32> {
    fn run(p: &[f32], f: impl Fn(f32) -> f32) -> Vec<f32> {
        p.iter().map(|&x| f(x)).collect()
    }
    match kind {
        BinaryKind::Add => run(p, |x| BinaryKind::Add.apply(x, s)),
        BinaryKind::Sub => run(p, |x| BinaryKind::Sub.apply(x, s)),
        BinaryKind::Mul => run(p, |x| BinaryKind::Mul.apply(x, s)),
        BinaryKind::Div => run(p, |x| BinaryKind::Div.apply(x, s)),
        BinaryKind::Min => run(p, |x| BinaryKind::Min.apply(x, s)),
        BinaryKind::Max => run(p, |x| BinaryKind::Max.apply(x, s)),
    }
}

/// Finiteness of a plane, scanned in fixed blocks without an early exit inside
/// a block so the comparison vectorizes.
fn all_finite(p: &[f32]) -> bool {
    p.chunks(256)
        .all(|c| c.iter().fold(true, |ok, v| ok & (v.abs() < f32::INFINITY)))
}

fn reduce_max(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let r0 = &src[2 * y * w..(2 * y + 1) * w];
        let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
        for x in 0..ow {
            out.push(r0[2 * x].max(r0[2 * x + 1]).max(r1[2 * x]).max(r1[2 * x + 1]));
        }
    }
    out
}

fn upsample(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let ow = 2 * w;
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..2 * h {
        let row = &src[(y / 2) * w..(y / 2 + 1) * w];
        out.extend((0..ow).map(|x| row[x / 2]));
    }
    out
}

/// Executes `prog` on named inputs, returning the output value with bands `b0..`.
///
/// All inputs must share one grid whose sides are divisible by `2^max_level`.
pub fn interpret(prog: &Program, inputs: &BTreeMap<String, GridImage>) -> Result<GridImage, IsaError> {
    let report = validate(prog)?;
    let mut grid: Option<(usize, usize)> = None;
    for decl in &prog.inputs {
        let img = inputs
            .get(&decl.name)
            .ok_or_else(|| IsaError::Input(format!("missing input {}", decl.name)))?;
        if img.bands().len() != decl.bands {
            return Err(IsaError::Input(format!(
                "input {} declares {} bands, got {}",
                decl.name,
                decl.bands,
                img.bands().len()
            )));
        }
        let dims = (img.height(), img.width());
        match grid {
            Some(g) if g != dims => {
                return Err(IsaError::Input(format!(
                    "input {} is {}x{}, other inputs are {}x{}",
                    decl.name, dims.0, dims.1, g.0, g.1
                )))
            }
            _ => grid = Some(dims),
        }
    }
    let (h0, w0) = grid.ok_or_else(|| IsaError::Input("program declares no inputs".into()))?;
    let m = 1usize << report.max_level.max(0);
    if h0 % m != 0 || w0 % m != 0 {
        return Err(IsaError::Input(format!(
            "input grid {h0}x{w0} is not divisible by {m}"
        )));
    }

    // Index of the last instruction reading each value.
    let mut last_use: BTreeMap<ValueId, usize> = BTreeMap::new();
    for (i, ins) in prog.instrs.iter().enumerate() {
        for &a in &ins.args {
            last_use.insert(a, i);
        }
    }
    let mut env: BTreeMap<ValueId, Value> = BTreeMap::new();
    for (index, ins) in prog.instrs.iter().enumerate() {
        let arg = |k: usize| &env[&ins.args[k]];
        let mapped = |v: &Value, f: &dyn Fn(&[f32]) -> Vec<f32>| Value {
            height: v.height,
            width: v.width,
            bands: v.bands.iter().map(|b| Arc::new(f(b))).collect(),
        };
        let (out, check) = match &ins.op {
            Op::Const(c) => (
                Value {
                    height: h0,
                    width: w0,
                    bands: vec![Arc::new(vec![*c; h0 * w0])],
                },
                false,
            ),
            Op::Input(name) => {
                let img = &inputs[name];
                (
                    Value {
                        height: h0,
                        width: w0,
                        bands: img.bands().iter().map(|b| Arc::new(b.values.clone())).collect(),
                    },
                    true,
                )
            }
            Op::Conv2d(k) => {
                let v = arg(0);
                (mapped(v, &|p| conv_plane(p, v.height, v.width, k)), true)
            }
            Op::Unary(kind) => (mapped(arg(0), &|p| map_unary(*kind, p)), true),
            Op::ScalarBinary(kind, s) => (
                mapped(arg(0), &|p| map_scalar(*kind, p, *s)),
                true,
            ),
            Op::Binary(kind) => {
                let (a, b) = (arg(0), arg(1));
                let bands = a
                    .bands
                    .iter()
                    .zip(&b.bands)
                    .map(|(p, q)| Arc::new(map_binary(*kind, p, q)))
                    .collect();
                (
                    Value {
                        height: a.height,
                        width: a.width,
                        bands,
                    },
                    true,
                )
            }
            Op::Cat => {
                let first = arg(0);
                let bands = ins.args.iter().flat_map(|a| env[a].bands.iter().cloned()).collect();
                (
                    Value {
                        height: first.height,
                        width: first.width,
                        bands,
                    },
                    false,
                )
            }
            Op::Select(idx) => {
                let v = arg(0);
                (
                    Value {
                        height: v.height,
                        width: v.width,
                        bands: idx.iter().map(|&i| v.bands[i].clone()).collect(),
                    },
                    false,
                )
            }
            Op::ReduceMax => {
                let v = arg(0);
                if v.height % 2 != 0 || v.width % 2 != 0 {
                    return Err(IsaError::Validation {
                        index,
                        dest: ins.dest,
                        message: format!("REDUCE_MAX of an odd {}x{} grid", v.height, v.width),
                    });
                }
                let mut out = mapped(v, &|p| reduce_max(p, v.height, v.width));
                out.height /= 2;
                out.width /= 2;
                (out, false)
            }
            Op::UpsampleNearest => {
                let v = arg(0);
                let mut out = mapped(v, &|p| upsample(p, v.height, v.width));
                out.height *= 2;
                out.width *= 2;
                (out, false)
            }
        };
        if check && !out.bands.iter().all(|b| all_finite(b)) {
            return Err(IsaError::NonFinite {
                index,
                dest: ins.dest,
            });
        }
        for a in &ins.args {
            if last_use.get(a) == Some(&index) && *a != prog.output {
                env.remove(a);
            }
        }
        env.insert(ins.dest, out);
    }
    let out = env.remove(&prog.output).ok_or(IsaError::UndefinedOutput(prog.output))?;
    let bands = out
        .bands
        .into_iter()
        .enumerate()
        .map(|(i, p)| Band {
            name: format!("b{i}"),
            values: Arc::try_unwrap(p).unwrap_or_else(|shared| (*shared).clone()),
        })
        .collect();
    GridImage::new(out.height, out.width, bands).map_err(|e| IsaError::Input(e.to_string()))
}
