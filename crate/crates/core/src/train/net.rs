//! Training-mode forward and backward passes of the whole network over flat
//! parameter tensors in registry order.

use crate::error::{Error, Result};
use crate::gemm::Real;
use crate::model::{Block, GraphSpec, ModelConfig, NodeKind, ParamSet};
use crate::train::ops::{
    bce_logits, bn_train_bwd, bn_train_fwd, concat_bwd, concat_fwd, conv_bwd, conv_fwd, pool_bwd, pool_fwd,
    prelu_bwd, prelu_fwd, upsample_bwd, upsample_fwd, Batch, BnCache,
};

/// Tensor offsets within one conv-BN-PReLU unit of the registry.
pub mod slot {
    pub const CONV: usize = 0;
    pub const GAMMA: usize = 1;
    pub const BETA: usize = 2;
    pub const MEAN: usize = 3;
    pub const VAR: usize = 4;
    pub const SLOPE: usize = 5;
    pub const PER_UNIT: usize = 6;
}

/// Registry index of the first tensor of `unit` (0 or 1) in block `b`.
pub fn unit_base(cfg: &ModelConfig, b: Block, unit: usize) -> usize {
    let block = match b {
        Block::Down(d) => d - 1,
        Block::Up(u) => 2 * cfg.depth - u,
    };
    (2 * block + unit) * slot::PER_UNIT
}

pub fn head_weight_index(cfg: &ModelConfig) -> usize {
    4 * cfg.depth * slot::PER_UNIT
}

pub fn head_bias_index(cfg: &ModelConfig) -> usize {
    head_weight_index(cfg) + 1
}

struct UnitCache<T> {
    input: Batch<T>,
    bn: BnCache<T>,
    /// Batch-norm output, the PReLU input.
    pre: Batch<T>,
    base: usize,
}

enum NodeCache<T> {
    Nothing,
    Tcbp(Vec<UnitCache<T>>),
    Pool { arg: Vec<usize>, h: usize, w: usize },
    Concat { a_channels: usize },
    Head { input: Batch<T> },
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct Tape<T> {
    caches: Vec<NodeCache<T>>,
}

/// Batch statistics of one batch-norm layer, for the running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStat {
    /// Registry index of the layer's `running_mean`; `running_var` follows it.
    pub mean_tensor: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel that entered the statistics.
    pub count: usize,
}

impl<T> Tape<T> {
    pub fn bn_stats(&self) -> Vec<BnStat>
    where
        T: Real,
    {
        let mut out = Vec::new();
        for c in &self.caches {
            if let NodeCache::Tcbp(units) = c {
                for u in units {
                    out.push(BnStat {
                        mean_tensor: u.base + slot::MEAN,
                        mean: u.bn.mean.clone(),
                        var: u.bn.var.clone(),
                        count: u.bn.count(),
                    });
                }
            }
        }
        out
    }
}

/// Checks tensor lengths against the registry and the batch against the config.
pub fn check_inputs<T>(cfg: &ModelConfig, params: &[Vec<T>], x: &Batch<T>) -> Result<()> {
    let specs = ParamSet::registry(cfg)?;
    if specs.len() != params.len() || specs.iter().zip(params).any(|(s, t)| s.len() != t.len()) {
        return Err(Error::ParamMismatch("tensors do not match the registry".into()));
    }
    if x.n == 0 {
        return Err(Error::config("empty batch"));
    }
    if x.c != cfg.in_bands {
        return Err(Error::dim(format!("model expects {} bands, batch has {}", cfg.in_bands, x.c)));
    }
    let m = cfg.size_multiple();
    if x.h % m != 0 || x.w % m != 0 {
        return Err(Error::dim(format!("patch {}x{} is not divisible by {m}", x.h, x.w)));
    }
    Ok(())
}

/// Training-mode forward pass returning head logits.
pub fn forward_train<T: Real>(g: &GraphSpec, params: &[Vec<T>], x: Batch<T>) -> Result<(Batch<T>, Tape<T>)> {
    let cfg = g.config();
    check_inputs(cfg, params, &x)?;
    let (k, width, eps) = (cfg.kernel_size, cfg.width, cfg.bn_eps as f64);
    let nodes = g.nodes();
    let mut uses = vec![0usize; nodes.len()];
    for n in nodes {
        for &i in &n.inputs {
            uses[i] += 1;
        }
    }
    let mut values: Vec<Option<Batch<T>>> = (0..nodes.len()).map(|_| None).collect();
    let mut caches = Vec::with_capacity(nodes.len());
    let mut input = Some(x);
    for (id, node) in nodes.iter().enumerate() {
        let arg = |j: usize| values[node.inputs[j]].as_ref().expect("topological order");
        let (out, cache) = match &node.kind {
            NodeKind::Input => (input.take().expect("single input"), NodeCache::Nothing),
            NodeKind::Tcbp(b) => {
                let mut h = arg(0).clone();
                let mut units = Vec::with_capacity(2);
                for unit in 0..2 {
                    let base = unit_base(cfg, *b, unit);
                    let z = conv_fwd(&h, &params[base + slot::CONV], None, width, k);
                    let (y, bn) = bn_train_fwd(&z, &params[base + slot::GAMMA], &params[base + slot::BETA], eps);
                    let out = prelu_fwd(&y, &params[base + slot::SLOPE]);
                    units.push(UnitCache {
                        input: std::mem::replace(&mut h, out),
                        bn,
                        pre: y,
                        base,
                    });
                }
                (h, NodeCache::Tcbp(units))
            }
            NodeKind::MaxPool => {
                let x = arg(0);
                let (y, arg_idx) = pool_fwd(x);
                (
                    y,
                    NodeCache::Pool {
                        arg: arg_idx,
                        h: x.h,
                        w: x.w,
                    },
                )
            }
            NodeKind::Upsample => (upsample_fwd(arg(0)), NodeCache::Nothing),
            NodeKind::Concat => {
                let a = arg(0);
                (concat_fwd(a, arg(1)), NodeCache::Concat { a_channels: a.c })
            }
            NodeKind::Head => {
                let x = arg(0).clone();
                let hb = head_bias_index(cfg);
                let y = conv_fwd(&x, &params[hb - 1], Some(&params[hb]), 1, k);
                (y, NodeCache::Head { input: x })
            }
        };
        for &i in &node.inputs {
            uses[i] -= 1;
            if uses[i] == 0 {
                values[i] = None;
            }
        }
        values[id] = Some(out);
        caches.push(cache);
    }
    let logits = values.pop().flatten().expect("graph has an output");
    Ok((logits, Tape { caches }))
}

fn accumulate<T: Real>(slot: &mut Option<Batch<T>>, d: Batch<T>) {
    match slot {
        Some(acc) => acc.add_assign(&d),
        None => *slot = Some(d),
    }
}

/// Gradients of every registry tensor given the logit gradient. Running
/// statistics receive zero gradient.
pub fn backward_train<T: Real>(
    g: &GraphSpec,
    params: &[Vec<T>],
    tape: Tape<T>,
    dlogits: Batch<T>,
) -> Vec<Vec<T>> {
    let cfg = g.config();
    let k = cfg.kernel_size;
    let nodes = g.nodes();
    let mut grads: Vec<Vec<T>> = params.iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut dvals: Vec<Option<Batch<T>>> = (0..nodes.len()).map(|_| None).collect();
    dvals[g.output()] = Some(dlogits);
    let feeds_data = |id: usize| nodes[nodes[id].inputs[0]].kind != NodeKind::Input;
    for (id, cache) in tape.caches.into_iter().enumerate().rev() {
        let Some(d) = dvals[id].take() else { continue };
        let node = &nodes[id];
        match cache {
            NodeCache::Nothing if node.kind == NodeKind::Upsample => {
                accumulate(&mut dvals[node.inputs[0]], upsample_bwd(&d));
            }
            NodeCache::Nothing => {}
            NodeCache::Tcbp(units) => {
                let mut d = Some(d);
                for (unit, u) in units.into_iter().enumerate().rev() {
                    let base = u.base;
                    let dy = prelu_bwd(
                        &u.pre,
                        &params[base + slot::SLOPE],
                        d.as_ref().expect("gradient flows"),
                        &mut grads[base + slot::SLOPE],
                    );
                    let (lo, hi) = grads.split_at_mut(base + slot::BETA);
                    let dz = bn_train_bwd(&dy, &u.bn, &params[base + slot::GAMMA], &mut lo[base + slot::GAMMA], &mut hi[0]);
                    let want_dx = unit == 1 || feeds_data(id);
                    d = conv_bwd(&u.input, &params[base + slot::CONV], &dz, k, &mut grads[base + slot::CONV], None, want_dx);
                }
                if let Some(d) = d {
                    accumulate(&mut dvals[node.inputs[0]], d);
                }
            }
            NodeCache::Pool { arg, h, w } => {
                accumulate(&mut dvals[node.inputs[0]], pool_bwd(&d, &arg, h, w));
            }
            NodeCache::Concat { a_channels } => {
                let (da, db) = concat_bwd(&d, a_channels);
                accumulate(&mut dvals[node.inputs[0]], da);
                accumulate(&mut dvals[node.inputs[1]], db);
            }
            NodeCache::Head { input } => {
                let hb = head_bias_index(cfg);
                let (lo, hi) = grads.split_at_mut(hb);
                let dx = conv_bwd(&input, &params[hb - 1], &d, k, &mut lo[hb - 1], Some(&mut hi[0]), feeds_data(id));
                if let Some(dx) = dx {
                    accumulate(&mut dvals[node.inputs[0]], dx);
                }
            }
        }
    }
    grads
}

/// Result of one training-mode pass over a batch.
pub struct Step<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
    pub logits: Batch<T>,
    pub bn_stats: Vec<BnStat>,
}

/// Mean cross-entropy loss of the batch and the gradient of every tensor.
pub fn loss_and_grads<T: Real>(g: &GraphSpec, params: &[Vec<T>], x: Batch<T>, masks: &[u8]) -> Result<Step<T>> {
    if masks.len() != x.n * x.plane_len() {
        return Err(Error::dim(format!(
            "masks hold {} pixels, batch has {}",
            masks.len(),
            x.n * x.plane_len()
        )));
    }
    let (logits, tape) = forward_train(g, params, x)?;
    let (loss, dz) = bce_logits(&logits.data, masks);
    let bn_stats = tape.bn_stats();
    let dlogits = Batch {
        data: dz,
        ..logits.clone()
    };
    let grads = backward_train(g, params, tape, dlogits);
    Ok(Step {
        loss,
        grads,
        logits,
        bn_stats,
    })
}

/// Loss only, for finite differences.
pub fn loss<T: Real>(g: &GraphSpec, params: &[Vec<T>], x: Batch<T>, masks: &[u8]) -> Result<f64> {
    let (logits, _) = forward_train(g, params, x)?;
    Ok(bce_logits(&logits.data, masks).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_graph;

    #[test]
    fn slot_layout_matches_registry() {
        for depth in 1..=3 {
            let cfg = ModelConfig::with_depth(depth);
            let reg = ParamSet::registry(&cfg).unwrap();
            for d in 1..=depth {
                assert_eq!(reg[unit_base(&cfg, Block::Down(d), 1) + slot::SLOPE].name, format!("down{d}.prelu2.slope"));
                assert_eq!(reg[unit_base(&cfg, Block::Up(d), 0) + slot::CONV].name, format!("up{d}.conv1.weight"));
                assert_eq!(reg[unit_base(&cfg, Block::Up(d), 0) + slot::VAR].name, format!("up{d}.bn1.running_var"));
            }
            assert_eq!(reg[head_weight_index(&cfg)].name, "head.weight");
            assert_eq!(reg[head_bias_index(&cfg)].name, "head.bias");
        }
    }

    #[test]
    fn collapsed_network_head_bias_gradient() {
        let cfg = ModelConfig::with_depth(1);
        let g = build_graph(&cfg).unwrap();
        let mut flat: Vec<Vec<f64>> = ParamSet::zeros(&cfg, 0.25)
            .unwrap()
            .to_flat()
            .into_iter()
            .map(|t| t.into_iter().map(f64::from).collect())
            .collect();
        let b = 0.3;
        flat[head_bias_index(&cfg)][0] = b;
        let x = Batch::from_fn(2, 10, 4, 4, |_| 0.5);
        let masks: Vec<u8> = (0..32).map(|i| (i % 3 == 0) as u8).collect();
        let step = loss_and_grads(&g, &flat, x, &masks).unwrap();
        let mean_m = masks.iter().map(|&m| m as f64).sum::<f64>() / 32.0;
        let want = crate::train::ops::sigmoid64(b) - mean_m;
        assert!((step.grads[head_bias_index(&cfg)][0] - want).abs() < 1e-12);
    }
}
