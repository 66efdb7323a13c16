use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_infer, concat_channels, conv2d_same, head_sigmoid, maxpool2, prelu, upsample2_nearest,
};
use crate::model::{GraphSpec, NodeKind, ParamSet, TcbpParams};
use crate::tensor::Tensor;

fn tcbp(x: &Tensor, p: &TcbpParams) -> Result<Tensor> {
    let mut h = x.clone();
    for unit in 0..2 {
        let (c, bn, pr) = p.unit(unit);
        h = prelu(&batchnorm_infer(&conv2d_same(&h, c)?, bn)?, pr)?;
    }
    Ok(h)
}

/// Inference-mode forward pass returning a `1 x H x W` cloud-probability map.
pub fn forward(x: &Tensor, g: &GraphSpec, p: &ParamSet) -> Result<Tensor> {
    let cfg = g.config();
    p.check(cfg)?;
    if x.channels() != cfg.in_bands {
        return Err(Error::dim(format!(
            "model expects {} bands, input has {}",
            cfg.in_bands,
            x.channels()
        )));
    }
    let m = cfg.size_multiple();
    if x.height() % m != 0 || x.width() % m != 0 {
        return Err(Error::dim(format!(
            "input {}x{} is not divisible by {m}; pad it first",
            x.height(),
            x.width()
        )));
    }
    let nodes = g.nodes();
    // Remaining consumers per node, so intermediates are dropped once used.
    let mut uses = vec![0usize; nodes.len()];
    for n in nodes {
        for &i in &n.inputs {
            uses[i] += 1;
        }
    }
    let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
    for (id, node) in nodes.iter().enumerate() {
        let arg = |k: usize| -> &Tensor { values[node.inputs[k]].as_ref().expect("topological order") };
        let out = match &node.kind {
            NodeKind::Input => x.clone(),
            NodeKind::Tcbp(b) => tcbp(arg(0), p.block(*b))?,
            NodeKind::MaxPool => maxpool2(arg(0))?,
            NodeKind::Upsample => upsample2_nearest(arg(0))?,
            NodeKind::Concat => {
                let mut acc = arg(0).clone();
                for k in 1..node.inputs.len() {
                    acc = concat_channels(&acc, arg(k))?;
                }
                acc
            }
            NodeKind::Head => head_sigmoid(&conv2d_same(arg(0), &p.head)?)?,
        };
        for &i in &node.inputs {
            uses[i] -= 1;
            if uses[i] == 0 {
                values[i] = None;
            }
        }
        values[id] = Some(out);
    }
    Ok(values.pop().flatten().expect("graph has an output"))
}
