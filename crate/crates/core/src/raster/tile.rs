//! Reflect padding and halo-overlapped tiled inference.
//!
//! Every tile is a window of one virtual raster: the input extended
//! indefinitely by mirror reflection. A tile's window is its core grown by the
//! halo on every side, with the core rounded up to the network's size multiple.
//! Window origins sit on multiples of that size multiple, so pooling grids line up
//! across tiles. A core pixel only sees inputs inside its window, and those are
//! identical to the ones seen in the whole-image pass. Tiled and whole-image
//! outputs are therefore bit-identical.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::isa::{interpret, GridImage, Program};
use crate::lower::{lower_network, INPUT_NAME};
use crate::model::{build_graph, forward, GraphSpec, ModelConfig, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Dense layer-by-layer forward pass.
    Reference,
    /// The lowered program run by the instruction interpreter.
    Lowered,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Reference => "reference",
            Engine::Lowered => "lowered",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Engine::Reference),
            "lowered" => Ok(Engine::Lowered),
            _ => Err(Error::config(format!("unknown engine {s:?}; expected reference or lowered"))),
        }
    }
}

/// Index into `0..n` of position `i` on the mirror-reflected line (edge
/// samples are not repeated: `-1` maps to `1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// The `h x w` window at `(y0, x0)` of the reflect-extended raster.
pub fn reflect_window(x: &Tensor, y0: isize, x0: isize, h: usize, w: usize) -> Tensor {
    let (sh, sw) = (x.height(), x.width());
    let rows: Vec<usize> = (0..h).map(|r| reflect_index(y0 + r as isize, sh)).collect();
    let cols: Vec<usize> = (0..w).map(|c| reflect_index(x0 + c as isize, sw)).collect();
    let mut data = Vec::with_capacity(x.channels() * h * w);
    for ch in 0..x.channels() {
        let plane = x.plane(ch);
        for &r in &rows {
            data.extend(cols.iter().map(|&c| plane[r * sw + c]));
        }
    }
    Tensor::new(x.channels(), h, w, data).expect("window dimensions are positive")
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pads the right and bottom edges up to the next multiple of `m`
/// (`m = 0` is treated as 1). Returns the padded tensor and the original size.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> (Tensor, (usize, usize)) {
    let m = m.max(1);
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    (reflect_window(x, 0, 0, ph, pw), (h, w))
}

/// Inverse of [`pad_to_multiple`].
pub fn crop_to(x: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    x.crop(0, 0, h, w)
}

/// Rectangle in raster coordinates; windows may start before the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: isize,
    pub x: isize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    /// Output pixels this tile is responsible for.
    pub core: Rect,
    /// Input extent fed to the engine.
    pub window: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile: Option<usize>,
    pub halo: usize,
    pub multiple: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    /// Plan for `tile x tile` cores. The halo is rounded up to a
    /// multiple of `multiple`, which must be a power of two dividing `tile`.
    pub fn new(height: usize, width: usize, tile: usize, halo: usize, multiple: usize) -> Result<Self> {
        Self::check(height, width, multiple)?;
        let halo = round_up(halo, multiple);
        if tile == 0 || tile % multiple != 0 {
            return Err(Error::config(format!(
                "tile size {tile} must be a positive multiple of {multiple}"
            )));
        }
        if tile < 2 * halo {
            return Err(Error::config(format!(
                "tile size {tile} is smaller than twice the halo ({halo})"
            )));
        }
        Ok(Self::build(height, width, Some(tile), halo, multiple))
    }

    /// Single-tile plan covering the whole raster.
    pub fn whole(height: usize, width: usize, halo: usize, multiple: usize) -> Result<Self> {
        Self::check(height, width, multiple)?;
        Ok(Self::build(height, width, None, round_up(halo, multiple), multiple))
    }

    fn check(height: usize, width: usize, multiple: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::dim("raster dimensions must be positive"));
        }
        if !multiple.is_power_of_two() {
            return Err(Error::config(format!("size multiple {multiple} is not a power of two")));
        }
        Ok(())
    }

    fn build(height: usize, width: usize, tile: Option<usize>, halo: usize, multiple: usize) -> Self {
        let (th, tw) = tile.map_or((height, width), |t| (t, t));
        let mut tiles = Vec::new();
        for y in (0..height).step_by(th) {
            for x in (0..width).step_by(tw) {
                let core = Rect {
                    y: y as isize,
                    x: x as isize,
                    height: th.min(height - y),
                    width: tw.min(width - x),
                };
                let window = Rect {
                    y: core.y - halo as isize,
                    x: core.x - halo as isize,
                    height: round_up(core.height, multiple) + 2 * halo,
                    width: round_up(core.width, multiple) + 2 * halo,
                };
                tiles.push(Tile { core, window });
            }
        }
        TilePlan {
            height,
            width,
            tile,
            halo,
            multiple,
            tiles,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOptions {
    pub engine: Engine,
    /// Core size; `None` runs the whole raster as one tile.
    pub tile: Option<usize>,
    /// Replaces the network's receptive halo (still rounded up to the size
    /// multiple). Only useful for demonstrating seam artifacts.
    pub halo: Option<usize>,
}

impl TileOptions {
    pub fn new(engine: Engine, tile: Option<usize>) -> Self {
        TileOptions {
            engine,
            tile,
            halo: None,
        }
    }
}

enum Runner<'a> {
    Reference(GraphSpec, &'a ParamSet),
    Lowered(Program),
}

impl Runner<'_> {
    fn run(&self, window: &Tensor) -> Result<Tensor> {
        match self {
            Runner::Reference(g, p) => forward(window, g, p),
            Runner::Lowered(prog) => {
                let inputs = [(INPUT_NAME.to_string(), GridImage::from_tensor(window, &[])?)].into();
                interpret(prog, &inputs)?.to_tensor()
            }
        }
    }
}

/// Cloud probability of `raster` (band count must match the model), a
/// single-band tensor of the raster's size.
pub fn tiled_infer_with(raster: &Tensor, cfg: &ModelConfig, params: &ParamSet, opts: &TileOptions) -> Result<Tensor> {
    let g = build_graph(cfg)?;
    params.check(cfg)?;
    if raster.channels() != cfg.in_bands {
        return Err(Error::dim(format!(
            "the raster has {} bands but the model expects {}",
            raster.channels(),
            cfg.in_bands
        )));
    }
    let halo = opts.halo.unwrap_or_else(|| g.receptive_halo());
    let (h, w, m) = (raster.height(), raster.width(), cfg.size_multiple());
    let plan = match opts.tile {
        Some(t) => TilePlan::new(h, w, t, halo, m)?,
        None => TilePlan::whole(h, w, halo, m)?,
    };
    let runner = match opts.engine {
        Engine::Reference => Runner::Reference(g, params),
        Engine::Lowered => Runner::Lowered(lower_network(&g, params)?),
    };
    let results: Vec<Tensor> = plan
        .tiles
        .par_iter()
        .map(|t| {
            let win = reflect_window(raster, t.window.y, t.window.x, t.window.height, t.window.width);
            runner.run(&win)
        })
        .collect::<Result<_>>()?;
    let mut out = Tensor::zeros(1, h, w)?;
    for (t, prob) in plan.tiles.iter().zip(&results) {
        let (oy, ox) = ((t.core.y - t.window.y) as usize, (t.core.x - t.window.x) as usize);
        let (cy, cx) = (t.core.y as usize, t.core.x as usize);
        for r in 0..t.core.height {
            let src = &prob.plane(0)[(oy + r) * prob.width() + ox..][..t.core.width];
            out.plane_mut(0)[(cy + r) * w + cx..][..t.core.width].copy_from_slice(src);
        }
    }
    Ok(out)
}

pub fn tiled_infer(raster: &Tensor, cfg: &ModelConfig, params: &ParamSet, engine: Engine, tile: usize) -> Result<Tensor> {
    tiled_infer_with(raster, cfg, params, &TileOptions::new(engine, Some(tile)))
}

/// Whole-image inference: one window reflect-padded by the halo.
pub fn infer_whole(raster: &Tensor, cfg: &ModelConfig, params: &ParamSet, engine: Engine) -> Result<Tensor> {
    tiled_infer_with(raster, cfg, params, &TileOptions::new(engine, None))
}
