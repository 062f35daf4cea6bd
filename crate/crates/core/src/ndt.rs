//! Neural decision trees built from a class dendrogram.
//!
//! Every internal node is its own network choosing among child class groups.
//! Nodes are stored in pre-order; node ids are paths from the root (`r`,
//! `r0`, `r01`, ...), which also seed each node's initialization so that a
//! node at the same path with the same configuration trains identically in
//! every variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{verify_sample, Verdict};
use crate::data::Dataset;
use crate::error::{parse_document, Error, Result};
use crate::groups::{spec_standard, ClusterTree, ClusterTreeFile};
use crate::network::{LayerSpec, Network};
use crate::tensor::Tensor;
use crate::train::{train, History, LossMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    /// Robust binary node at every merge.
    Full,
    /// Robust root, natural binary nodes below.
    Mixed,
    /// Robust binary nodes above `max_depth`; each subtree rooted at
    /// `max_depth` becomes one natural multi-way node.
    TruncatedMixed { max_depth: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: String,
    pub depth: usize,
    pub classes: Vec<usize>,
    pub child_groups: Vec<Vec<usize>>,
    /// Plan index of each child's node; `None` for singleton leaves.
    pub children: Vec<Option<usize>>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NdtPlan {
    pub variant: Variant,
    pub eps_table: Vec<f64>,
    pub input_shape: Vec<usize>,
    /// Layer template; the final dense layer is resized per node.
    pub architecture: Vec<LayerSpec>,
    pub tree: ClusterTree,
    pub nodes: Vec<PlanNode>,
}

fn check_eps_table(table: &[f64]) -> Result<()> {
    if table.is_empty() {
        return Err(Error::invalid("eps table is empty"));
    }
    if let Some(e) = table.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::invalid(format!("eps table entry {e} is not a finite value >= 0")));
    }
    if let Some(w) = table.windows(2).find(|w| w[1] > w[0]) {
        return Err(Error::invalid(format!(
            "eps table must not increase with depth ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

fn resize_head(arch: &[LayerSpec], k: usize) -> Result<Vec<LayerSpec>> {
    let mut layers = arch.to_vec();
    match layers.last_mut() {
        Some(LayerSpec::Dense { out_dim, .. }) => *out_dim = k,
        _ => return Err(Error::shape("node architecture must end in a dense layer")),
    }
    Ok(layers)
}

pub fn build_plan(
    tree: &ClusterTree,
    variant: Variant,
    eps_table: &[f64],
    input_shape: &[usize],
    architecture: &[LayerSpec],
) -> Result<NdtPlan> {
    check_eps_table(eps_table)?;
    if let Variant::TruncatedMixed { max_depth: 0 } = variant {
        return Err(Error::invalid("truncation depth must be >= 1 (the root stays binary)"));
    }
    crate::network::infer_shapes(input_shape, &resize_head(architecture, 2)?)?;
    let table_at = |d: usize| eps_table[d.min(eps_table.len() - 1)];

    struct Builder<'a> {
        tree: &'a ClusterTree,
        variant: Variant,
        nodes: Vec<PlanNode>,
    }
    impl Builder<'_> {
        fn visit(&mut self, cluster: usize, depth: usize, id: String, eps_of: &dyn Fn(usize, bool) -> f64) -> usize {
            let here = self.nodes.len();
            let classes = self.tree.node(cluster).classes.clone();
            let collapse = matches!(self.variant, Variant::TruncatedMixed { max_depth } if depth >= max_depth);
            let (child_groups, sub): (Vec<Vec<usize>>, Vec<Option<usize>>) = if collapse {
                (classes.iter().map(|&c| vec![c]).collect(), vec![None; classes.len()])
            } else {
                let (l, r) = self.tree.node(cluster).children().expect("internal cluster");
                (
                    vec![self.tree.node(l).classes.clone(), self.tree.node(r).classes.clone()],
                    vec![Some(l), Some(r)],
                )
            };
            self.nodes.push(PlanNode {
                id: id.clone(),
                depth,
                classes,
                child_groups: child_groups.clone(),
                children: vec![None; child_groups.len()],
                eps: eps_of(depth, collapse),
            });
            for (k, c) in sub.into_iter().enumerate() {
                if let Some(c) = c {
                    if !self.tree.node(c).is_leaf() {
                        let idx = self.visit(c, depth + 1, format!("{id}{k}"), eps_of);
                        self.nodes[here].children[k] = Some(idx);
                    }
                }
            }
            here
        }
    }

    let eps_of = |depth: usize, collapsed: bool| match variant {
        Variant::Full => table_at(depth),
        Variant::Mixed => {
            if depth == 0 {
                eps_table[0]
            } else {
                0.0
            }
        }
        Variant::TruncatedMixed { .. } => {
            if collapsed {
                0.0
            } else {
                table_at(depth)
            }
        }
    };
    let mut b = Builder {
        tree,
        variant,
        nodes: vec![],
    };
    b.visit(tree.root(), 0, "r".into(), &eps_of);
    Ok(NdtPlan {
        variant,
        eps_table: eps_table.to_vec(),
        input_shape: input_shape.to_vec(),
        architecture: architecture.to_vec(),
        tree: tree.clone(),
        nodes: b.nodes,
    })
}

impl NdtPlan {
    pub fn n_classes(&self) -> usize {
        self.tree.n_classes()
    }

    /// Number of decision levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth + 1).max().unwrap_or(0)
    }

    pub fn node_architecture(&self, i: usize) -> Result<Vec<LayerSpec>> {
        resize_head(&self.architecture, self.nodes[i].child_groups.len())
    }
}

/// FNV-1a over the node id, mixed into the base seed.
fn node_seed(base: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    base ^ h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ndt {
    pub plan: NdtPlan,
    /// One network per plan node.
    pub networks: Vec<Network>,
}

/// Trains every node in pre-order on the samples of its class set, with
/// labels remapped to child-group indices. Nodes with `eps > 0` use the
/// robust loss at that radius, others natural cross-entropy. Schedule,
/// optimizer and batching come from `base`.
pub fn train_ndt(
    plan: &NdtPlan,
    ds: &Dataset,
    base: &TrainConfig,
    finetune_base: Option<&Network>,
) -> Result<(Ndt, Vec<History>)> {
    if ds.n_classes != plan.n_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, tree has {}",
            ds.n_classes,
            plan.n_classes()
        )));
    }
    if let Some(b) = finetune_base {
        if b.input_shape() != plan.input_shape.as_slice() {
            return Err(Error::shape("fine-tuning base has a different input shape"));
        }
    }
    let mut networks = Vec::with_capacity(plan.nodes.len());
    let mut histories = Vec::with_capacity(plan.nodes.len());
    for (i, node) in plan.nodes.iter().enumerate() {
        let k = node.child_groups.len();
        let mut route = vec![None; plan.n_classes()];
        for (g, members) in node.child_groups.iter().enumerate() {
            for &c in members {
                route[c] = Some(g);
            }
        }
        let sub = ds.filter_map_labels(format!("{}/{}", ds.name, node.id), k, |c| route[c])?;
        if sub.is_empty() {
            return Err(Error::Node {
                node: node.id.clone(),
                message: format!("no training samples for classes {:?}", node.classes),
            });
        }
        let seed = node_seed(base.seed, &node.id);
        let net = match finetune_base {
            Some(b) => b.clone_for_head(k, seed)?,
            None => Network::init(&plan.input_shape, plan.node_architecture(i)?, seed)?,
        };
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.partition = None;
        cfg.loss = if node.eps > 0.0 {
            LossMode::Robust { eps: node.eps }
        } else {
            LossMode::Natural
        };
        let (net, history) = train(net, &sub, &cfg).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => e,
            other => Error::Node {
                node: node.id.clone(),
                message: other.to_string(),
            },
        })?;
        networks.push(net);
        histories.push(history);
    }
    Ok((
        Ndt {
            plan: plan.clone(),
            networks,
        },
        histories,
    ))
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Ndt {
    pub fn n_classes(&self) -> usize {
        self.plan.n_classes()
    }

    pub fn root_network(&self) -> Result<&Network> {
        let root = &self.plan.nodes[0];
        if root.child_groups.len() != 2 {
            return Err(Error::invalid("root node is not binary"));
        }
        Ok(&self.networks[0])
    }

    /// Index of the root child group containing `class`.
    pub fn root_group_of(&self, class: usize) -> Result<usize> {
        self.plan.nodes[0]
            .child_groups
            .iter()
            .position(|g| g.contains(&class))
            .ok_or_else(|| Error::invalid(format!("class {class} not in tree")))
    }

    /// Routes one `[...input_shape]` sample by argmax (ties to the lower
    /// child) until a singleton group is selected.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.predict_within(x, usize::MAX, |_| true)
    }

    /// Routing that follows the child containing `forced` while the current
    /// node's classes are not all accepted by `inside`, then routes freely.
    pub fn predict_within(&self, x: &Tensor, forced: usize, inside: impl Fn(usize) -> bool) -> Result<usize> {
        let mut i = 0;
        loop {
            let node = &self.plan.nodes[i];
            let k = if node.classes.iter().all(|&c| inside(c)) {
                argmax_low(self.networks[i].forward(x)?.data())
            } else {
                node.child_groups
                    .iter()
                    .position(|g| g.contains(&forced))
                    .ok_or_else(|| Error::invalid(format!("class {forced} not under node {}", node.id)))?
            };
            match node.children[k] {
                Some(next) => i = next,
                None => return Ok(node.child_groups[k][0]),
            }
        }
    }

    /// Routes a `[B, ...]` batch, evaluating each node once on the samples
    /// that reach it.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let b = x.shape().first().copied().unwrap_or(0);
        let per = if b == 0 { 0 } else { x.len() / b };
        let mut out = vec![usize::MAX; b];
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, (0..b).collect())];
        while let Some((i, members)) = stack.pop() {
            if members.is_empty() {
                continue;
            }
            let node = &self.plan.nodes[i];
            let mut data = Vec::with_capacity(members.len() * per);
            for &m in &members {
                data.extend_from_slice(&x.data()[m * per..(m + 1) * per]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = members.len();
            let logits = self.networks[i].forward_batch(&Tensor::new(shape, data)?)?;
            let mut routed: Vec<Vec<usize>> = vec![vec![]; node.child_groups.len()];
            for (r, &m) in members.iter().enumerate() {
                routed[argmax_low(logits.row(r))].push(m);
            }
            for (k, ms) in routed.into_iter().enumerate() {
                match node.children[k] {
                    Some(next) => stack.push((next, ms)),
                    None => {
                        for m in ms {
                            out[m] = node.child_groups[k][0];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("nodes"))?;
        let mut entries = Vec::with_capacity(self.networks.len());
        for (node, net) in self.plan.nodes.iter().zip(&self.networks) {
            let rel = format!("nodes/{}.json", node.id);
            net.save(&dir.join(&rel))?;
            entries.push(ManifestNode {
                node: node.clone(),
                model: rel,
            });
        }
        let m = NdtManifest {
            format_version: 1,
            variant: self.plan.variant,
            eps_table: self.plan.eps_table.clone(),
            input_shape: self.plan.input_shape.clone(),
            architecture: self.plan.architecture.clone(),
            tree: self.plan.tree.to_file(),
            nodes: entries,
        };
        std::fs::write(dir.join("ndt.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Ndt> {
        let m: NdtManifest = parse_document(&std::fs::read_to_string(dir.join("ndt.json"))?)?;
        if m.format_version != 1 {
            return Err(Error::schema("format_version", format!("unsupported version {}", m.format_version)));
        }
        let tree = ClusterTree::from_file(&m.tree)?;
        let plan = build_plan(&tree, m.variant, &m.eps_table, &m.input_shape, &m.architecture)?;
        if plan.nodes.len() != m.nodes.len() {
            return Err(Error::schema("nodes", format!("{} nodes, tree implies {}", m.nodes.len(), plan.nodes.len())));
        }
        let mut networks = Vec::with_capacity(m.nodes.len());
        for (i, (want, got)) in plan.nodes.iter().zip(&m.nodes).enumerate() {
            if want != &got.node {
                return Err(Error::schema(format!("nodes[{i}]"), format!("node {} does not match the tree", got.node.id)));
            }
            let net = Network::load(&dir.join(&got.model))?;
            if net.n_classes() != want.child_groups.len() || net.input_shape() != plan.input_shape.as_slice() {
                return Err(Error::Node {
                    node: want.id.clone(),
                    message: "model shape does not match the node".into(),
                });
            }
            networks.push(net);
        }
        Ok(Ndt { plan, networks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestNode {
    #[serde(flatten)]
    pub node: PlanNode,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdtManifest {
    pub format_version: u32,
    pub variant: Variant,
    pub eps_table: Vec<f64>,
    pub input_shape: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
    pub tree: ClusterTreeFile,
    pub nodes: Vec<ManifestNode>,
}

/// Certifies the root decision for a sample whose true root group is
/// `true_group`.
pub fn certify_root(ndt: &Ndt, x: &Tensor, true_group: usize, eps: f64) -> Result<Verdict> {
    let root = ndt.root_network()?;
    verify_sample(root, x, true_group, eps, &spec_standard(true_group, 2)?)
}
