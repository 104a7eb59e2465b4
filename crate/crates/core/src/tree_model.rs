//! Tree-structured ensemble network.
//!
//! A [`TreeModel`] is a tree of nodes, each holding a sequence of layers.
//! The root starts out holding the whole backbone and every submodel's
//! classifier head hangs off a leaf. A submodel's path is the chain of nodes
//! from the root to the leaf carrying its head. Splitting duplicates the tail
//! of a node so that two groups of submodels continue on separate copies.
//!
//! Forward evaluation visits every node exactly once per batch, so layers
//! shared by several submodels are not recomputed.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{build_layers, Cache, Dims, Layer, LayerSpec, Linear, Mode, Param, Tensor};
use crate::task_split::SubtaskSpec;

pub type NodeId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub layers: Vec<Layer>,
    /// Sorted ids of the submodels whose path passes through this node.
    pub submodels: Vec<usize>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Head {
    pub node: NodeId,
    pub linear: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeModel {
    input: Dims,
    spec: SubtaskSpec,
    nodes: Vec<Node>,
    /// Indexed by submodel.
    heads: Vec<Head>,
    flops_budget: u64,
}

/// Activations and caches of one forward pass.
pub struct ForwardPass {
    /// One `[K_i(+1)] x batch` tensor per submodel.
    pub logits: Vec<Tensor>,
    /// How many times each node was evaluated (always one).
    pub node_evaluations: Vec<usize>,
    node_caches: Vec<Vec<Cache>>,
    head_inputs: Vec<Tensor>,
    batch: usize,
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Logits of every submodel for sample `b`.
    pub fn sample_logits(&self, b: usize) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .map(|t| (0..t.dims.channels).map(|r| t.data[r * t.batch + b]).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOutcome {
    /// Node now carrying the first group of the partition.
    pub first: NodeId,
    /// Node now carrying the second group.
    pub second: NodeId,
}

/// FLOPs of the unsplit backbone plus a single `N`-way classifier, the
/// default compute budget.
pub fn backbone_flops(layers: &[Layer], input: Dims, num_classes: usize) -> Result<u64> {
    let mut dims = input;
    let mut total = 0;
    for layer in layers {
        total += layer.flops(dims);
        dims = layer.out_dims(dims)?;
    }
    Ok(total + 2 * (dims.numel() * num_classes) as u64)
}

impl TreeModel {
    /// Single shared trunk built from `backbone`, with one independent head per subtask.
    pub fn init_shared<R: Rng>(
        backbone: &[LayerSpec],
        input: Dims,
        spec: &SubtaskSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if backbone.is_empty() {
            return Err(invalid("backbone has no layers"));
        }
        let (layers, _) = build_layers(backbone, input, rng)?;
        Self::from_layers(layers, input, spec, rng)
    }

    pub fn from_layers<R: Rng>(
        layers: Vec<Layer>,
        input: Dims,
        spec: &SubtaskSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("backbone has no layers"));
        }
        let mut dims = input;
        for (i, l) in layers.iter().enumerate() {
            dims = l
                .out_dims(dims)
                .map_err(|e| Error::ShapeMismatch(format!("backbone layer {i}: {e}")))?;
        }
        if dims.spatial() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backbone output {dims} must be 1x1 before the classifier heads"
            )));
        }
        let budget = backbone_flops(&layers, input, spec.total_classes())?;
        let m = spec.num_subtasks();
        let heads = (0..m)
            .map(|i| Head {
                node: 0,
                linear: Linear::new(dims.channels, spec.output_width(i), rng),
            })
            .collect();
        Ok(Self {
            input,
            spec: spec.clone(),
            nodes: vec![Node {
                parent: None,
                children: Vec::new(),
                layers,
                submodels: (0..m).collect(),
            }],
            heads,
            flops_budget: budget,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn spec(&self) -> &SubtaskSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub(crate) fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub fn num_submodels(&self) -> usize {
        self.heads.len()
    }

    pub fn flops_budget(&self) -> u64 {
        self.flops_budget
    }

    pub fn set_flops_budget(&mut self, budget: u64) {
        self.flops_budget = budget;
    }

    /// Root-to-leaf node sequence of a submodel.
    pub fn path(&self, submodel: usize) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = Some(self.heads[submodel].node);
        while let Some(n) = cur {
            path.push(n);
            cur = self.nodes[n].parent;
        }
        path.reverse();
        path
    }

    /// Number of layers between the input and the start of `node`.
    pub fn node_depth(&self, node: NodeId) -> usize {
        let mut depth = 0;
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            depth += self.nodes[p].layers.len();
            cur = self.nodes[p].parent;
        }
        depth
    }

    /// Input dims of every node.
    pub fn node_input_dims(&self) -> Result<Vec<Dims>> {
        let mut dims = vec![self.input; self.nodes.len()];
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            let mut d = dims[id];
            for (li, l) in node.layers.iter().enumerate() {
                d = l
                    .out_dims(d)
                    .map_err(|e| Error::ShapeMismatch(format!("node {id} layer {li}: {e}")))?;
            }
            for &c in &node.children {
                dims[c] = d;
            }
        }
        Ok(dims)
    }

    /// Output dims of every node.
    pub fn node_output_dims(&self) -> Result<Vec<Dims>> {
        let ins = self.node_input_dims()?;
        self.nodes
            .iter()
            .zip(ins)
            .map(|(n, d)| n.layers.iter().try_fold(d, |d, l| l.out_dims(d)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.layers)
            .map(Layer::param_count)
            .sum::<usize>()
            + self.heads.iter().map(|h| h.linear.param_count()).sum::<usize>()
    }

    /// FLOPs for one input, each node counted once; heads included.
    pub fn flops(&self) -> u64 {
        self.flops_for(self.input)
            .expect("model dims are kept consistent by every mutation")
    }

    pub fn flops_for(&self, input: Dims) -> Result<u64> {
        let mut dims = vec![input; self.nodes.len()];
        let mut total = 0;
        for id in 0..self.nodes.len() {
            let mut d = dims[id];
            for l in &self.nodes[id].layers {
                total += l.flops(d);
                d = l.out_dims(d)?;
            }
            for &c in &self.nodes[id].children {
                dims[c] = d;
            }
        }
        total += self.heads.iter().map(|h| h.linear.flops()).sum::<u64>();
        Ok(total)
    }

    /// Checks the tree, routing and channel-compatibility invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.heads.len();
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            return Err(invalid("node 0 must be the root"));
        }
        if self.nodes[0].submodels != (0..m).collect::<Vec<_>>() {
            return Err(invalid("root must be on every submodel path"));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            if n.submodels.is_empty() {
                return Err(invalid(format!("node {id} is on no submodel path")));
            }
            if id > 0 {
                let p = n.parent.ok_or_else(|| invalid(format!("node {id} has no parent")))?;
                if p >= id || !self.nodes[p].children.contains(&id) {
                    return Err(invalid(format!("node {id} has inconsistent parent {p}")));
                }
            }
            let mut covered: BTreeSet<usize> = BTreeSet::new();
            for &c in &n.children {
                if self.nodes[c].parent != Some(id) {
                    return Err(invalid(format!("child {c} of node {id} points elsewhere")));
                }
                for &s in &self.nodes[c].submodels {
                    if !covered.insert(s) {
                        return Err(invalid(format!("submodel {s} routed twice below node {id}")));
                    }
                }
            }
            for (s, h) in self.heads.iter().enumerate() {
                if h.node == id && (!n.is_leaf() || !covered.insert(s)) {
                    return Err(invalid(format!("head {s} misplaced at node {id}")));
                }
            }
            if covered.into_iter().collect::<Vec<_>>() != n.submodels {
                return Err(invalid(format!("node {id} submodel set does not match its subtree")));
            }
        }
        let outs = self.node_output_dims()?;
        for (s, h) in self.heads.iter().enumerate() {
            h.linear
                .out_dims(outs[h.node])
                .map_err(|e| Error::ShapeMismatch(format!("head {s}: {e}")))?;
            if h.linear.out_features != self.spec.output_width(s) {
                return Err(Error::ShapeMismatch(format!(
                    "head {s} has {} outputs, subtask needs {}",
                    h.linear.out_features,
                    self.spec.output_width(s)
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        if x.dims != self.input {
            return Err(Error::ShapeMismatch(format!(
                "input {} does not match model input {}",
                x.dims, self.input
            )));
        }
        let n = self.nodes.len();
        let mut outputs: Vec<Option<Tensor>> = vec![None; n];
        let mut node_caches = Vec::with_capacity(n);
        let mut node_evaluations = vec![0; n];
        for id in 0..n {
            let node = &self.nodes[id];
            let mut h = match node.parent {
                None => x.clone(),
                Some(p) => outputs[p].clone().expect("parents precede children"),
            };
            let mut caches = Vec::with_capacity(node.layers.len());
            for layer in &node.layers {
                let (y, c) = layer.forward(&h, mode)?;
                caches.push(c);
                h = y;
            }
            node_evaluations[id] += 1;
            node_caches.push(caches);
            outputs[id] = Some(h);
        }
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut head_inputs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let input = outputs[h.node].as_ref().expect("evaluated").clone();
            logits.push(h.linear.forward(&input)?);
            head_inputs.push(input);
        }
        Ok(ForwardPass {
            logits,
            node_evaluations,
            node_caches,
            head_inputs,
            batch: x.batch,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running averages.
    pub fn commit_stats(&mut self, pass: &ForwardPass) {
        for (node, caches) in self.nodes.iter_mut().zip(&pass.node_caches) {
            for (layer, cache) in node.layers.iter_mut().zip(caches) {
                layer.commit_stats(cache);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(|p| p.zero_grad());
    }

    pub fn visit_params(&mut self, mut f: impl FnMut(&mut Param)) {
        for node in &mut self.nodes {
            for layer in &mut node.layers {
                for p in layer.params_mut() {
                    f(p);
                }
            }
        }
        for h in &mut self.heads {
            f(&mut h.linear.weight);
            f(&mut h.linear.bias);
        }
    }

    /// Backpropagates head-output gradients (`None` for heads without loss)
    /// and accumulates parameter gradients.
    pub fn backward(&mut self, pass: &ForwardPass, head_grads: &[Option<&Tensor>]) -> Result<()> {
        if head_grads.len() != self.heads.len() {
            return Err(invalid(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                self.heads.len()
            )));
        }
        let n = self.nodes.len();
        let mut node_grads: Vec<Option<Tensor>> = vec![None; n];
        for (s, g) in head_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.dims != pass.logits[s].dims || g.batch != pass.batch {
                return Err(Error::ShapeMismatch(format!("gradient for head {s} has wrong shape")));
            }
            let head = &mut self.heads[s];
            let dx = head.linear.backward(&pass.head_inputs[s], g);
            accumulate(&mut node_grads[head.node], dx);
        }
        for id in (0..n).rev() {
            let Some(mut g) = node_grads[id].take() else { continue };
            let node = &mut self.nodes[id];
            for (layer, cache) in node.layers.iter_mut().zip(&pass.node_caches[id]).rev() {
                g = layer.backward(cache, &g);
            }
            if let Some(p) = node.parent {
                accumulate(&mut node_grads[p], g);
            }
        }
        Ok(())
    }

    /// Duplicates layers `layer_index..` of `node` so the submodels in
    /// `first` and `second` continue on separate, identical copies.
    ///
    /// Every existing child of `node` must fall entirely on one side. When
    /// `layer_index` is zero on a non-root node, the whole node is
    /// duplicated as a sibling instead of leaving an empty parent.
    pub fn split_at(
        &mut self,
        node: NodeId,
        layer_index: usize,
        first: &[usize],
        second: &[usize],
    ) -> Result<SplitOutcome> {
        let n = self
            .nodes
            .get(node)
            .ok_or_else(|| invalid(format!("no node {node}")))?;
        if first.is_empty() || second.is_empty() {
            return Err(invalid("split partition must be non-empty on both sides"));
        }
        if layer_index >= n.layers.len() {
            return Err(invalid(format!(
                "layer index {layer_index} outside node {node} with {} layers",
                n.layers.len()
            )));
        }
        let s: BTreeSet<usize> = first.iter().copied().collect();
        let t: BTreeSet<usize> = second.iter().copied().collect();
        if s.len() != first.len() || t.len() != second.len() || !s.is_disjoint(&t) {
            return Err(invalid("split partition sides must be disjoint sets"));
        }
        let union: Vec<usize> = s.union(&t).copied().collect();
        if union != n.submodels {
            return Err(invalid(format!(
                "partition {union:?} does not match submodels {:?} of node {node}",
                n.submodels
            )));
        }
        let side_of = |subs: &[usize]| -> Option<bool> {
            if subs.iter().all(|x| s.contains(x)) {
                Some(true)
            } else if subs.iter().all(|x| t.contains(x)) {
                Some(false)
            } else {
                None
            }
        };
        let mut first_children = Vec::new();
        let mut second_children = Vec::new();
        for &c in &n.children {
            match side_of(&self.nodes[c].submodels) {
                Some(true) => first_children.push(c),
                Some(false) => second_children.push(c),
                None => {
                    return Err(invalid(format!(
                        "child {c} of node {node} is shared across the partition"
                    )))
                }
            }
        }
        let s_vec: Vec<usize> = s.into_iter().collect();
        let t_vec: Vec<usize> = t.into_iter().collect();

        if layer_index == 0 && n.parent.is_some() {
            let parent = n.parent;
            let twin = Node {
                parent,
                children: second_children.clone(),
                layers: n.layers.clone(),
                submodels: t_vec.clone(),
            };
            let twin_id = self.nodes.len();
            self.nodes.push(twin);
            self.nodes[parent.expect("checked")].children.push(twin_id);
            let orig = &mut self.nodes[node];
            orig.children = first_children;
            orig.submodels = s_vec;
            for &c in &second_children {
                self.nodes[c].parent = Some(twin_id);
            }
            for &sub in &t_vec {
                if self.heads[sub].node == node {
                    self.heads[sub].node = twin_id;
                }
            }
            let map = self.restore_order();
            return Ok(SplitOutcome {
                first: map[node],
                second: map[twin_id],
            });
        }

        let tail: Vec<Layer> = self.nodes[node].layers.split_off(layer_index);
        let a_id = self.nodes.len();
        let b_id = a_id + 1;
        self.nodes.push(Node {
            parent: Some(node),
            children: first_children.clone(),
            layers: tail.clone(),
            submodels: s_vec.clone(),
        });
        self.nodes.push(Node {
            parent: Some(node),
            children: second_children.clone(),
            layers: tail,
            submodels: t_vec.clone(),
        });
        self.nodes[node].children = vec![a_id, b_id];
        for &c in &first_children {
            self.nodes[c].parent = Some(a_id);
        }
        for &c in &second_children {
            self.nodes[c].parent = Some(b_id);
        }
        for (sub, head) in self.heads.iter_mut().enumerate() {
            if head.node == node {
                head.node = if s_vec.contains(&sub) { a_id } else { b_id };
            }
        }
        let map = self.restore_order();
        Ok(SplitOutcome {
            first: map[a_id],
            second: map[b_id],
        })
    }

    /// Renumbers nodes in preorder when some child id precedes its parent's.
    /// Returns the old-to-new id map.
    fn restore_order(&mut self) -> Vec<NodeId> {
        let n = self.nodes.len();
        let ordered = self.nodes.iter().enumerate().all(|(id, node)| node.parent.map_or(true, |p| p < id));
        if ordered {
            return (0..n).collect();
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            order.push(id);
            let mut kids = self.nodes[id].children.clone();
            kids.sort_unstable();
            stack.extend(kids.into_iter().rev());
        }
        let mut map = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            map[old] = new;
        }
        let mut old_nodes: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        for &old in &order {
            let mut node = old_nodes[old].take().expect("each node visited once");
            node.parent = node.parent.map(|p| map[p]);
            for c in &mut node.children {
                *c = map[*c];
            }
            self.nodes.push(node);
        }
        for h in &mut self.heads {
            h.node = map[h.node];
        }
        map
    }

    /// Leaf nodes still shared by more than one submodel.
    pub fn shared_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf() && n.submodels.len() > 1)
            .map(|(id, _)| id)
            .collect()
    }

    /// True once every submodel ends on a leaf of its own.
    pub fn fully_split(&self) -> bool {
        self.shared_leaves().is_empty()
    }

    pub fn export(&self) -> Result<ArchitectureExport> {
        let ins = self.node_input_dims()?;
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (id, n) in self.nodes.iter().enumerate() {
            let mut d = ins[id];
            let mut layers = Vec::with_capacity(n.layers.len());
            for l in &n.layers {
                let out = l.out_dims(d)?;
                let (kernel, stride) = match l {
                    Layer::Conv(c) => (Some(c.kernel), Some(c.stride)),
                    Layer::Residual(r) => (Some(r.conv1.kernel), Some(r.conv1.stride)),
                    _ => (None, None),
                };
                layers.push(LayerExport {
                    kind: l.kind_name().to_string(),
                    input: d,
                    output: out,
                    kernel,
                    stride,
                    params: l.param_count(),
                    flops: l.flops(d),
                });
                d = out;
            }
            nodes.push(NodeExport {
                id,
                parent: n.parent,
                children: n.children.clone(),
                submodels: n.submodels.clone(),
                depth: self.node_depth(id),
                layers,
            });
        }
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(s, h)| HeadExport {
                submodel: s,
                node: h.node,
                classes: self.spec.groups()[s].clone(),
                in_features: h.linear.in_features,
                out_features: h.linear.out_features,
            })
            .collect();
        Ok(ArchitectureExport {
            input: self.input,
            nodes,
            heads,
            paths: (0..self.heads.len()).map(|s| self.path(s)).collect(),
            flops: self.flops(),
            flops_budget: self.flops_budget,
            params: self.param_count(),
        })
    }

    pub fn to_dot(&self) -> Result<String> {
        let arch = self.export()?;
        let mut out = String::from("digraph split_ensemble {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
        let _ = writeln!(out, "  input [shape=ellipse, label=\"input {}\"];", arch.input);
        for n in &arch.nodes {
            let mut label = format!("node {} | submodels {:?}", n.id, n.submodels);
            for l in &n.layers {
                let _ = write!(label, "\\l{} {} -> {}", l.kind, l.input, l.output);
            }
            label.push_str("\\l");
            let _ = writeln!(out, "  n{} [label=\"{}\"];", n.id, label);
            match n.parent {
                None => {
                    let _ = writeln!(out, "  input -> n{};", n.id);
                }
                Some(p) => {
                    let _ = writeln!(out, "  n{p} -> n{};", n.id);
                }
            }
        }
        for h in &arch.heads {
            let _ = writeln!(
                out,
                "  h{} [shape=oval, label=\"head {} classes {:?} ({} -> {})\"];\n  n{} -> h{};",
                h.submodel, h.submodel, h.classes, h.in_features, h.out_features, h.node, h.submodel
            );
        }
        out.push_str("}\n");
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerExport {
    pub kind: String,
    pub input: Dims,
    pub output: Dims,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stride: Option<usize>,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeExport {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub submodels: Vec<usize>,
    pub depth: usize,
    pub layers: Vec<LayerExport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadExport {
    pub submodel: usize,
    pub node: NodeId,
    pub classes: Vec<usize>,
    pub in_features: usize,
    pub out_features: usize,
}

/// Structured description of the architecture: nodes, layer shapes and routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureExport {
    pub input: Dims,
    pub nodes: Vec<NodeExport>,
    pub heads: Vec<HeadExport>,
    pub paths: Vec<Vec<NodeId>>,
    pub flops: u64,
    pub flops_budget: u64,
    pub params: usize,
}
