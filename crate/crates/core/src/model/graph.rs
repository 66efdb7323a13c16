use crate::error::Result;
use crate::model::ModelConfig;

pub type NodeId = usize;

/// Which TCBP block a node's parameters come from (1-based level).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Down(usize),
    Up(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input,
    /// Two conv -> batch norm -> PReLU units.
    Tcbp(Block),
    MaxPool,
    Upsample,
    /// Channel concatenation of the inputs, in input order.
    Concat,
    /// Single-filter convolution with bias followed by the logistic function.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    /// Power-of-two scale level; 0 is full resolution.
    pub level: usize,
    /// Output channel count.
    pub channels: usize,
}

/// Topologically ordered network description.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    config: ModelConfig,
    nodes: Vec<Node>,
}

impl GraphSpec {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn count(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Receptive radius of the output with respect to the input, in input pixels.
    pub fn receptive_halo(&self) -> usize {
        let r = (self.config.kernel_size / 2) as i64;
        let period = 1i64 << self.nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut halo = 0i64;
        for q in 0..period {
            let (lo, hi) = self.input_interval(self.output(), q, q, r);
            halo = halo.max(q - lo).max(hi - q);
        }
        halo as usize
    }

    // Interval of input pixels (level 0) that can influence node outputs `a..=b`
    // (in the node's own grid), taking the hull over every path.
    fn input_interval(&self, id: NodeId, a: i64, b: i64, r: i64) -> (i64, i64) {
        let node = &self.nodes[id];
        let (a, b) = match node.kind {
            NodeKind::Input => return (a, b),
            NodeKind::Tcbp(_) => (a - 2 * r, b + 2 * r),
            NodeKind::Head => (a - r, b + r),
            NodeKind::MaxPool => (2 * a, 2 * b + 1),
            NodeKind::Upsample => (a.div_euclid(2), b.div_euclid(2)),
            NodeKind::Concat => (a, b),
        };
        node.inputs
            .iter()
            .map(|&i| self.input_interval(i, a, b, r))
            .fold((i64::MAX, i64::MIN), |(l, h), (x, y)| (l.min(x), h.max(y)))
    }
}

/// Builds the symmetric down/up network with skip concatenations.
pub fn build_graph(cfg: &ModelConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let w = cfg.width;
    let mut nodes: Vec<Node> = Vec::new();
    let push = |nodes: &mut Vec<Node>, name: String, kind, inputs: Vec<NodeId>, level, channels| {
        nodes.push(Node {
            name,
            kind,
            inputs,
            level,
            channels,
        });
        nodes.len() - 1
    };
    let mut prev = push(&mut nodes, "input".into(), NodeKind::Input, vec![], 0, cfg.in_bands);
    let mut skips = Vec::with_capacity(cfg.depth);
    for d in 1..=cfg.depth {
        let block = push(&mut nodes, format!("down{d}"), NodeKind::Tcbp(Block::Down(d)), vec![prev], d - 1, w);
        skips.push(block);
        prev = push(&mut nodes, format!("pool{d}"), NodeKind::MaxPool, vec![block], d, w);
    }
    for u in (1..=cfg.depth).rev() {
        let up = push(&mut nodes, format!("up{u}.upsample"), NodeKind::Upsample, vec![prev], u - 1, w);
        let cat = push(
            &mut nodes,
            format!("up{u}.concat"),
            NodeKind::Concat,
            vec![up, skips[u - 1]],
            u - 1,
            2 * w,
        );
        prev = push(&mut nodes, format!("up{u}"), NodeKind::Tcbp(Block::Up(u)), vec![cat], u - 1, w);
    }
    push(&mut nodes, "head".into(), NodeKind::Head, vec![prev], 0, 1);
    Ok(GraphSpec { config: *cfg, nodes })
}

/// Receptive halo of the network described by `cfg`.
pub fn receptive_halo(cfg: &ModelConfig) -> Result<usize> {
    Ok(build_graph(cfg)?.receptive_halo())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(g: &GraphSpec) -> Vec<&str> {
        g.nodes().iter().map(|n| n.name.as_str()).collect()
    }

    #[test]
    fn minimal_graph() {
        let g = build_graph(&ModelConfig::with_depth(1)).unwrap();
        assert_eq!(
            names(&g),
            ["input", "down1", "pool1", "up1.upsample", "up1.concat", "up1", "head"]
        );
        let cat = &g.nodes()[4];
        assert_eq!(cat.inputs, vec![3, 1]);
        assert_eq!(cat.channels, 128);
    }

    #[test]
    fn depth4_counts() {
        let g = build_graph(&ModelConfig::with_depth(4)).unwrap();
        assert_eq!(g.count(|k| *k == NodeKind::MaxPool), 4);
        assert_eq!(g.count(|k| *k == NodeKind::Upsample), 4);
        assert_eq!(g.count(|k| *k == NodeKind::Concat), 4);
        assert_eq!(g.count(|k| matches!(k, NodeKind::Tcbp(_))), 8);
        assert_eq!(g.count(|k| *k == NodeKind::Head), 1);
        // Every concat joins the upsampled stream with the skip at its own scale.
        for n in g.nodes().iter().filter(|n| n.kind == NodeKind::Concat) {
            let (up, skip) = (&g.nodes()[n.inputs[0]], &g.nodes()[n.inputs[1]]);
            assert_eq!(up.kind, NodeKind::Upsample);
            assert!(matches!(skip.kind, NodeKind::Tcbp(Block::Down(_))));
            assert_eq!(up.level, n.level);
            assert_eq!(skip.level, n.level);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(build_graph(&ModelConfig::with_depth(0)).is_err());
        assert!(build_graph(&ModelConfig::with_depth(7)).is_err());
        let cfg = ModelConfig {
            width: 32,
            ..ModelConfig::default()
        };
        assert!(build_graph(&cfg).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = ModelConfig::with_depth(3);
        assert_eq!(build_graph(&cfg).unwrap(), build_graph(&cfg).unwrap());
    }

    fn chain(kinds: &[NodeKind]) -> GraphSpec {
        let mut nodes = vec![Node {
            name: "input".into(),
            kind: NodeKind::Input,
            inputs: vec![],
            level: 0,
            channels: 1,
        }];
        for (i, k) in kinds.iter().enumerate() {
            nodes.push(Node {
                name: format!("n{i}"),
                kind: k.clone(),
                inputs: vec![i],
                level: 0,
                channels: 1,
            });
        }
        GraphSpec {
            config: ModelConfig::with_depth(1),
            nodes,
        }
    }

    #[test]
    fn halo_of_simple_chains() {
        assert_eq!(chain(&[NodeKind::Head]).receptive_halo(), 1);
        assert_eq!(chain(&[NodeKind::Head, NodeKind::Head]).receptive_halo(), 2);
        assert_eq!(chain(&[NodeKind::Tcbp(Block::Down(1))]).receptive_halo(), 2);
    }

    #[test]
    fn halo_of_networks() {
        // Worked by hand from the interval recurrence.
        assert_eq!(receptive_halo(&ModelConfig::with_depth(1)).unwrap(), 6);
        assert_eq!(receptive_halo(&ModelConfig::with_depth(2)).unwrap(), 16);
        let h: Vec<usize> = (1..=6)
            .map(|d| receptive_halo(&ModelConfig::with_depth(d)).unwrap())
            .collect();
        assert!(h.windows(2).all(|w| w[0] < w[1]));
    }
}
