//! Per-submodel weight sensitivity and the correlation-driven split search.
//!
//! Each submodel scores every weight on its path by `|w · dL_i/dw|`. The
//! top-k fraction of each layer forms a mask, masks of different submodels
//! are compared by intersection-over-union, and the submodels sharing a
//! layer form a complete graph weighted by those IoUs. The minimum edge of
//! that graph's maximum spanning tree (the MCT) is the strongest correlation
//! that any bipartition has to cut; a layer whose MCT falls below the
//! threshold is where the branch gets split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Mode, Tensor};
use crate::task_split::Objective;
use crate::tree_model::{NodeId, TreeModel};

pub const DEFAULT_TOPK: f64 = 0.2;
pub const DEFAULT_MCT_THRESHOLD: f64 = 0.4;
/// Added to every score before normalization so all-zero layers stay well defined.
pub const SCORE_EPS: f64 = 1e-12;

/// `(node, layer index within node)`
pub type LayerKey = (NodeId, usize);

/// Normalized sensitivity scores of one submodel, per weight layer on its path.
#[derive(Clone, Debug, Default)]
pub struct SubmodelSensitivity {
    pub layers: BTreeMap<LayerKey, Vec<f64>>,
}

impl SubmodelSensitivity {
    pub fn layer(&self, key: LayerKey) -> Result<&[f64]> {
        self.layers
            .get(&key)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("node {} layer {} is not a weight layer on this path", key.0, key.1)))
    }
}

/// Adds [`SCORE_EPS`] to every raw score and rescales them to sum to one.
pub fn normalize_sensitivity(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().map(|s| s + SCORE_EPS).sum();
    raw.iter().map(|s| (s + SCORE_EPS) / total).collect()
}

/// SNIP-style sensitivity of every submodel on one shared batch.
///
/// The forward pass uses batch statistics without committing them, so the
/// model's running averages are unchanged. Parameter gradients are left
/// zeroed on return.
pub fn snip_sensitivity(
    model: &mut TreeModel,
    objective: &Objective,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<SubmodelSensitivity>> {
    if objective.spec() != model.spec() {
        return Err(invalid("objective and model disagree on the subtask split"));
    }
    let pass = model.forward(x, Mode::Train)?;
    let m = model.num_submodels();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let (_, grad) = objective.subtask_loss(i, &pass.logits[i], labels)?;
        model.zero_grad();
        let mut head_grads: Vec<Option<&Tensor>> = vec![None; m];
        head_grads[i] = Some(&grad);
        model.backward(&pass, &head_grads)?;
        let mut sens = SubmodelSensitivity::default();
        for node in model.path(i) {
            for (li, layer) in model.node(node).layers.iter().enumerate() {
                if !layer.is_weight_layer() {
                    continue;
                }
                let raw: Vec<f64> = layer
                    .sensitivity_weights()
                    .into_iter()
                    .flat_map(|p| p.value.iter().zip(&p.grad).map(|(w, g)| (w * g).abs()))
                    .collect();
                sens.layers.insert((node, li), normalize_sensitivity(&raw));
            }
        }
        out.push(sens);
    }
    model.zero_grad();
    Ok(out)
}

/// Sorted indices of the `ceil(k · len)` highest scores; ties go to the lower index.
pub fn topk_mask(scores: &[f64], k: f64) -> Result<Vec<usize>> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(invalid(format!("top-k fraction must be in (0, 1], got {k}")));
    }
    if scores.is_empty() {
        return Err(invalid("cannot mask an empty sensitivity vector"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("sensitivity scores contain NaN"));
    }
    let count = ((k * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

/// Intersection over union of two sorted index sets. Two empty sets count as identical.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Top-k selection of one submodel in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMask {
    pub layer: LayerKey,
    pub submodel: usize,
    pub k_fraction: f64,
    /// Sorted weight-element indices.
    pub selected: Vec<usize>,
}

impl SensitivityMask {
    pub fn new(layer: LayerKey, submodel: usize, scores: &[f64], k_fraction: f64) -> Result<Self> {
        Ok(Self {
            layer,
            submodel,
            k_fraction,
            selected: topk_mask(scores, k_fraction)?,
        })
    }

    pub fn iou(&self, other: &SensitivityMask) -> Result<f64> {
        if self.layer != other.layer {
            return Err(invalid(format!(
                "masks belong to different layers {:?} and {:?}",
                self.layer, other.layer
            )));
        }
        Ok(iou(&self.selected, &other.selected))
    }
}

/// Complete graph over submodels with symmetric edge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGraph {
    pub submodels: Vec<usize>,
    /// `weights[a][b]` between `submodels[a]` and `submodels[b]`; the diagonal is unused.
    pub weights: Vec<Vec<f64>>,
}

impl CorrelationGraph {
    pub fn new(submodels: Vec<usize>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let n = submodels.len();
        if weights.len() != n || weights.iter().any(|r| r.len() != n) {
            return Err(invalid("correlation matrix must be square over the submodels"));
        }
        for a in 0..n {
            for b in 0..n {
                if a != b && (weights[a][b] - weights[b][a]).abs() > 1e-12 {
                    return Err(invalid("correlation matrix must be symmetric"));
                }
                if a != b && weights[a][b].is_nan() {
                    return Err(invalid("correlation matrix contains NaN"));
                }
            }
        }
        Ok(Self { submodels, weights })
    }

    /// IoU graph of the given submodels' masks.
    pub fn from_masks(submodels: Vec<usize>, masks: &[Vec<usize>]) -> Result<Self> {
        let n = submodels.len();
        if masks.len() != n {
            return Err(invalid("one mask per submodel required"));
        }
        let mut w = vec![vec![1.0; n]; n];
        for a in 0..n {
            for b in a + 1..n {
                let v = iou(&masks[a], &masks[b]);
                w[a][b] = v;
                w[b][a] = v;
            }
        }
        Self::new(submodels, w)
    }

    pub fn len(&self) -> usize {
        self.submodels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submodels.is_empty()
    }

    /// Edges of a maximum spanning tree as `(a, b, weight)` in vertex indices.
    pub fn max_spanning_tree(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        if n < 2 {
            return Vec::new();
        }
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::NEG_INFINITY; n];
        let mut from = vec![0usize; n];
        in_tree[0] = true;
        for v in 1..n {
            best[v] = self.weights[0][v];
        }
        let mut edges = Vec::with_capacity(n - 1);
        for _ in 1..n {
            let v = (0..n)
                .filter(|&v| !in_tree[v])
                .max_by(|&a, &b| best[a].total_cmp(&best[b]).then(b.cmp(&a)))
                .expect("vertices remain");
            in_tree[v] = true;
            edges.push((from[v], v, best[v]));
            for u in 0..n {
                if !in_tree[u] && self.weights[v][u] > best[u] {
                    best[u] = self.weights[v][u];
                    from[u] = v;
                }
            }
        }
        edges
    }

    /// Minimum edge weight of the maximum spanning tree.
    pub fn mct(&self) -> Result<f64> {
        self.max_spanning_tree()
            .iter()
            .map(|e| e.2)
            .min_by(f64::total_cmp)
            .ok_or_else(|| invalid("MCT needs at least two submodels"))
    }

    /// Bipartition whose strongest crossing edge equals the MCT.
    ///
    /// The first side is the set reachable from the first submodel through
    /// edges strictly above the MCT. Every optimal side containing that
    /// submodel is a superset of it, so it is also the smallest one when
    /// sides are compared as membership vectors in vertex order.
    pub fn mct_partition(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let t = self.mct()?;
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for u in 0..n {
                if !seen[u] && u != v && self.weights[v][u] > t {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (v, &s) in seen.iter().enumerate() {
            if s {
                a.push(self.submodels[v]);
            } else {
                b.push(self.submodels[v]);
            }
        }
        Ok((a, b))
    }
}

/// Correlation of the submodels sharing one weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub node: NodeId,
    pub layer: usize,
    /// Position of the layer counted from the network input.
    pub depth: usize,
    pub kind: String,
    pub mct: f64,
    pub graph: CorrelationGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub node: NodeId,
    pub layer: usize,
    pub depth: usize,
    pub mct: f64,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSearch {
    /// Every scanned layer, in scan order.
    pub profile: Vec<LayerCorrelation>,
    pub decision: Option<SplitDecision>,
}

/// Scans the weight layers of every shared leaf and picks the shallowest
/// one whose MCT is below `threshold` (lowest node id on equal depth).
pub fn find_split(
    model: &TreeModel,
    sensitivities: &[SubmodelSensitivity],
    topk: f64,
    threshold: f64,
) -> Result<SplitSearch> {
    if sensitivities.len() != model.num_submodels() {
        return Err(invalid("one sensitivity map per submodel required"));
    }
    let mut search = SplitSearch::default();
    for node in model.shared_leaves() {
        let n = model.node(node);
        let depth0 = model.node_depth(node);
        for (li, layer) in n.layers.iter().enumerate() {
            if !layer.is_weight_layer() {
                continue;
            }
            let masks = n
                .submodels
                .iter()
                .map(|&s| {
                    let scores = sensitivities[s].layers.get(&(node, li)).ok_or_else(|| {
                        invalid(format!("submodel {s} has no scores for node {node} layer {li}"))
                    })?;
                    topk_mask(scores, topk)
                })
                .collect::<Result<Vec<_>>>()?;
            let graph = CorrelationGraph::from_masks(n.submodels.clone(), &masks)?;
            let mct = graph.mct()?;
            let depth = depth0 + li;
            if mct < threshold {
                let better = match &search.decision {
                    None => true,
                    Some(d) => (depth, node) < (d.depth, d.node),
                };
                if better {
                    let (first, second) = graph.mct_partition()?;
                    search.decision = Some(SplitDecision {
                        node,
                        layer: li,
                        depth,
                        mct,
                        first,
                        second,
                    });
                }
            }
            search.profile.push(LayerCorrelation {
                node,
                layer: li,
                depth,
                kind: layer.kind_name().to_string(),
                mct,
                graph,
            });
        }
    }
    Ok(search)
}
