//! Structural importance and shared-structure-safe filter pruning.
//!
//! Filters are grouped into channel spaces: every layer reading or writing
//! the same activation channels belongs to the same space, across node
//! boundaries and through residual additions. Removing channel `j` of a
//! space removes filter `j` from every producer, channel `j` from every
//! norm, and input slice `j` from every consumer, so the network stays
//! well formed. A group `(space, j)` is named by the first producer filter
//! in tree order, its [`StructureRef`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, Mode, Tensor};
use crate::task_split::Objective;
use crate::tree_model::{NodeId, TreeModel};

pub const DEFAULT_PRUNE_FRACTION: f64 = 0.02;

/// Sub-layer inside a node's layer list; residual blocks have several.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Main,
    Conv1,
    Norm1,
    Conv2,
    Norm2,
    ShortcutConv,
    ShortcutNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerAddr {
    pub node: NodeId,
    pub layer: usize,
    pub part: Part,
}

impl LayerAddr {
    fn new(node: NodeId, layer: usize, part: Part) -> Self {
        Self { node, layer, part }
    }
}

/// A prunable structure: filter `filter` of the producer at `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StructureRef {
    pub layer: LayerAddr,
    pub filter: usize,
}

/// A set of activation channels shared by the layers that write and read them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSpace {
    pub width: usize,
    /// Layers whose output filters index this space, in tree order.
    pub producers: Vec<LayerAddr>,
    pub norms: Vec<LayerAddr>,
    /// Layers whose input channels index this space.
    pub consumers: Vec<LayerAddr>,
    /// Submodels whose head reads this space.
    pub heads: Vec<usize>,
    /// Submodels whose path contains a producer or norm of this space.
    pub submodels: Vec<usize>,
    /// The network input, which identity shortcuts can join but never shrink.
    pub is_input: bool,
}

impl ChannelSpace {
    fn new(width: usize) -> Self {
        Self {
            width,
            producers: Vec::new(),
            norms: Vec::new(),
            consumers: Vec::new(),
            heads: Vec::new(),
            submodels: Vec::new(),
            is_input: false,
        }
    }

    /// The input space and spaces without a producer cannot shrink.
    pub fn prunable(&self) -> bool {
        !self.is_input && !self.producers.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = &LayerAddr> {
        self.producers.iter().chain(&self.norms)
    }
}

/// Every channel space of the model, the first one being the input.
pub fn channel_spaces(model: &TreeModel) -> Vec<ChannelSpace> {
    let input = model.input_dims();
    let mut spaces = vec![ChannelSpace {
        is_input: true,
        ..ChannelSpace::new(input.channels)
    }];
    let mut subs: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
    let n = model.nodes().len();
    let mut node_in = vec![0usize; n];
    for id in 0..n {
        let node = model.node(id);
        let mut cur = node_in[id];
        let add = |spaces: &mut Vec<ChannelSpace>, subs: &mut Vec<BTreeSet<usize>>, width: usize| {
            spaces.push(ChannelSpace::new(width));
            subs.push(BTreeSet::new());
            spaces.len() - 1
        };
        let touch = |subs: &mut Vec<BTreeSet<usize>>, s: usize| subs[s].extend(&node.submodels);
        for (li, layer) in node.layers.iter().enumerate() {
            let at = |part| LayerAddr::new(id, li, part);
            match layer {
                Layer::Conv(c) => {
                    spaces[cur].consumers.push(at(Part::Main));
                    cur = add(&mut spaces, &mut subs, c.out_channels);
                    spaces[cur].producers.push(at(Part::Main));
                    touch(&mut subs, cur);
                }
                Layer::Linear(l) => {
                    spaces[cur].consumers.push(at(Part::Main));
                    cur = add(&mut spaces, &mut subs, l.out_features);
                    spaces[cur].producers.push(at(Part::Main));
                    touch(&mut subs, cur);
                }
                Layer::Norm(_) => {
                    spaces[cur].norms.push(at(Part::Main));
                    touch(&mut subs, cur);
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
                Layer::Residual(r) => {
                    spaces[cur].consumers.push(at(Part::Conv1));
                    let mid = add(&mut spaces, &mut subs, r.conv1.out_channels);
                    spaces[mid].producers.push(at(Part::Conv1));
                    spaces[mid].norms.push(at(Part::Norm1));
                    spaces[mid].consumers.push(at(Part::Conv2));
                    touch(&mut subs, mid);
                    let out = if r.shortcut.is_some() {
                        spaces[cur].consumers.push(at(Part::ShortcutConv));
                        let out = add(&mut spaces, &mut subs, r.conv2.out_channels);
                        spaces[out].producers.push(at(Part::Conv2));
                        spaces[out].producers.push(at(Part::ShortcutConv));
                        spaces[out].norms.push(at(Part::Norm2));
                        spaces[out].norms.push(at(Part::ShortcutNorm));
                        out
                    } else {
                        spaces[cur].producers.push(at(Part::Conv2));
                        spaces[cur].norms.push(at(Part::Norm2));
                        cur
                    };
                    touch(&mut subs, out);
                    cur = out;
                }
            }
        }
        for &c in &node.children {
            node_in[c] = cur;
        }
        for (s, h) in model.heads().iter().enumerate() {
            if h.node == id {
                spaces[cur].heads.push(s);
            }
        }
    }
    for (space, s) in spaces.iter_mut().zip(subs) {
        space.submodels = s.into_iter().collect();
    }
    spaces
}

enum Unit<'a> {
    Conv(&'a Conv2d),
    Linear(&'a Linear),
    Norm(&'a BatchNorm),
}

enum UnitMut<'a> {
    Conv(&'a mut Conv2d),
    Linear(&'a mut Linear),
    Norm(&'a mut BatchNorm),
}

fn unit(model: &TreeModel, a: LayerAddr) -> Unit<'_> {
    match (&model.node(a.node).layers[a.layer], a.part) {
        (Layer::Conv(c), Part::Main) => Unit::Conv(c),
        (Layer::Linear(l), Part::Main) => Unit::Linear(l),
        (Layer::Norm(n), Part::Main) => Unit::Norm(n),
        (Layer::Residual(r), Part::Conv1) => Unit::Conv(&r.conv1),
        (Layer::Residual(r), Part::Norm1) => Unit::Norm(&r.norm1),
        (Layer::Residual(r), Part::Conv2) => Unit::Conv(&r.conv2),
        (Layer::Residual(r), Part::Norm2) => Unit::Norm(&r.norm2),
        (Layer::Residual(r), Part::ShortcutConv) => Unit::Conv(&r.shortcut.as_ref().expect("projection").conv),
        (Layer::Residual(r), Part::ShortcutNorm) => Unit::Norm(&r.shortcut.as_ref().expect("projection").norm),
        (l, p) => panic!("no {p:?} in {} layer", l.kind_name()),
    }
}

fn unit_mut(model: &mut TreeModel, a: LayerAddr) -> UnitMut<'_> {
    match (&mut model.nodes_mut()[a.node].layers[a.layer], a.part) {
        (Layer::Conv(c), Part::Main) => UnitMut::Conv(c),
        (Layer::Linear(l), Part::Main) => UnitMut::Linear(l),
        (Layer::Norm(n), Part::Main) => UnitMut::Norm(n),
        (Layer::Residual(r), Part::Conv1) => UnitMut::Conv(&mut r.conv1),
        (Layer::Residual(r), Part::Norm1) => UnitMut::Norm(&mut r.norm1),
        (Layer::Residual(r), Part::Conv2) => UnitMut::Conv(&mut r.conv2),
        (Layer::Residual(r), Part::Norm2) => UnitMut::Norm(&mut r.norm2),
        (Layer::Residual(r), Part::ShortcutConv) => {
            UnitMut::Conv(&mut r.shortcut.as_mut().expect("projection").conv)
        }
        (Layer::Residual(r), Part::ShortcutNorm) => {
            UnitMut::Norm(&mut r.shortcut.as_mut().expect("projection").norm)
        }
        (l, p) => panic!("no {p:?} in {} layer", l.kind_name()),
    }
}

/// Squared inner product of a structure's parameters with their loss gradients.
pub fn importance_score(weights: &[f64], grads: &[f64]) -> f64 {
    let dot: f64 = weights.iter().zip(grads).map(|(w, g)| w * g).sum();
    dot * dot
}

fn member_score(model: &TreeModel, a: LayerAddr, j: usize) -> f64 {
    match unit(model, a) {
        Unit::Conv(c) => {
            let (w, b) = c.filter(j);
            let (g, gb) = c.filter_grad(j);
            let dot: f64 = w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>() + b * gb;
            dot * dot
        }
        Unit::Linear(l) => {
            let (w, b) = l.filter(j);
            let (g, gb) = l.filter_grad(j);
            let dot: f64 = w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>() + b * gb;
            dot * dot
        }
        Unit::Norm(n) => importance_score(
            &[n.gamma.value[j], n.beta.value[j]],
            &[n.gamma.grad[j], n.beta.grad[j]],
        ),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub structure: StructureRef,
    pub submodel: usize,
    pub score: f64,
}

/// Scores of every prunable structure on one submodel's path, read from
/// the parameter gradients currently stored in the model.
fn scores_from_grads(model: &TreeModel, spaces: &[ChannelSpace], submodel: usize) -> Vec<ImportanceScore> {
    let mut out = Vec::new();
    for space in spaces.iter().filter(|s| s.prunable()) {
        if !space.submodels.contains(&submodel) {
            continue;
        }
        let on_path: Vec<LayerAddr> = space
            .members()
            .filter(|a| model.node(a.node).submodels.contains(&submodel))
            .copied()
            .collect();
        for j in 0..space.width {
            let score = on_path
                .iter()
                .map(|&a| member_score(model, a, j))
                .fold(0.0, f64::max);
            out.push(ImportanceScore {
                structure: StructureRef {
                    layer: space.producers[0],
                    filter: j,
                },
                submodel,
                score,
            });
        }
    }
    out
}

/// Importance of every prunable structure on `submodel`'s path under its
/// own subtask loss on the batch `(x, labels)`. Coupled members share one
/// score, the largest of theirs.
pub fn structural_importance(
    model: &mut TreeModel,
    objective: &Objective,
    submodel: usize,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<ImportanceScore>> {
    if submodel >= model.num_submodels() {
        return Err(invalid(format!("no submodel {submodel}")));
    }
    Ok(all_importances(model, objective, x, labels)?.swap_remove(submodel))
}

/// [`structural_importance`] for every submodel from one shared forward pass.
pub fn all_importances(
    model: &mut TreeModel,
    objective: &Objective,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<Vec<ImportanceScore>>> {
    if objective.spec() != model.spec() {
        return Err(invalid("objective and model disagree on the subtask split"));
    }
    let spaces = channel_spaces(model);
    let pass = model.forward(x, Mode::Train)?;
    let m = model.num_submodels();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let (_, grad) = objective.subtask_loss(i, &pass.logits[i], labels)?;
        model.zero_grad();
        let mut head_grads: Vec<Option<&Tensor>> = vec![None; m];
        head_grads[i] = Some(&grad);
        model.backward(&pass, &head_grads)?;
        out.push(scores_from_grads(model, &spaces, i));
    }
    model.zero_grad();
    Ok(out)
}

/// Number of prunable structures in the model.
pub fn prunable_filter_count(model: &TreeModel) -> usize {
    channel_spaces(model)
        .iter()
        .filter(|s| s.prunable())
        .map(|s| s.width)
        .sum()
}

/// `ceil(fraction · prunable filters)`, at least one.
pub fn n_remove_for(model: &TreeModel, fraction: f64) -> usize {
    ((fraction * prunable_filter_count(model) as f64).ceil() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Sorted and free of duplicates.
    pub removals: Vec<StructureRef>,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.removals.is_empty()
    }
}

/// Picks the structures in the bottom `n_remove` of every submodel sharing
/// them, never emptying a channel space.
pub fn plan_prune(scores: &[Vec<ImportanceScore>], model: &TreeModel, n_remove: usize) -> Result<PrunePlan> {
    if n_remove == 0 {
        return Err(invalid("n_remove must be at least 1"));
    }
    let spaces = channel_spaces(model);
    let mut bottom: Vec<BTreeSet<StructureRef>> = vec![BTreeSet::new(); model.num_submodels()];
    let mut best: BTreeMap<StructureRef, f64> = BTreeMap::new();
    for list in scores {
        let mut ranked: Vec<&ImportanceScore> = list.iter().collect();
        if ranked.iter().any(|s| s.score.is_nan() || s.score < 0.0) {
            return Err(invalid("importance scores must be non-negative numbers"));
        }
        ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.structure.cmp(&b.structure)));
        for s in &ranked {
            let e = best.entry(s.structure).or_insert(0.0);
            *e = e.max(s.score);
        }
        for s in ranked.into_iter().take(n_remove) {
            let slot = bottom
                .get_mut(s.submodel)
                .ok_or_else(|| invalid(format!("score for unknown submodel {}", s.submodel)))?;
            slot.insert(s.structure);
        }
    }
    let mut removals = Vec::new();
    for space in spaces.iter().filter(|s| s.prunable()) {
        let mut chosen: Vec<StructureRef> = (0..space.width)
            .map(|filter| StructureRef {
                layer: space.producers[0],
                filter,
            })
            .filter(|r| space.submodels.iter().all(|&i| bottom[i].contains(r)))
            .collect();
        if chosen.len() >= space.width {
            // keep the most important channel of a fully selected space
            let keep = chosen
                .iter()
                .copied()
                .max_by(|a, b| best[a].total_cmp(&best[b]).then(b.cmp(a)))
                .expect("non-empty");
            chosen.retain(|r| *r != keep);
        }
        removals.extend(chosen);
    }
    removals.sort();
    let flops_before = model.flops();
    let flops_after = if removals.is_empty() {
        flops_before
    } else {
        let mut pruned = model.clone();
        let plan = PrunePlan {
            removals: removals.clone(),
            flops_before,
            flops_after: 0,
        };
        apply_prune(&mut pruned, &plan)?;
        pruned.flops()
    };
    Ok(PrunePlan {
        removals,
        flops_before,
        flops_after,
    })
}

/// Removes the planned structures and every slice that depends on them.
pub fn apply_prune(model: &mut TreeModel, plan: &PrunePlan) -> Result<()> {
    let spaces = channel_spaces(model);
    let by_producer: BTreeMap<LayerAddr, usize> = spaces
        .iter()
        .enumerate()
        .filter(|(_, s)| s.prunable())
        .map(|(i, s)| (s.producers[0], i))
        .collect();
    let mut keep: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for r in &plan.removals {
        let &si = by_producer
            .get(&r.layer)
            .ok_or_else(|| invalid(format!("{:?} does not name a prunable layer", r.layer)))?;
        let mask = keep.entry(si).or_insert_with(|| vec![true; spaces[si].width]);
        if r.filter >= mask.len() || !mask[r.filter] {
            return Err(invalid(format!(
                "filter {} of {:?} is out of range or listed twice",
                r.filter, r.layer
            )));
        }
        mask[r.filter] = false;
    }
    for (&si, mask) in &keep {
        if !mask.iter().any(|&k| k) {
            return Err(invalid(format!("plan removes every channel of {:?}", spaces[si].producers[0])));
        }
    }
    for (si, mask) in keep {
        let space = &spaces[si];
        for &a in &space.producers {
            match unit_mut(model, a) {
                UnitMut::Conv(c) => c.retain_outputs(&mask),
                UnitMut::Linear(l) => l.retain_outputs(&mask),
                UnitMut::Norm(_) => unreachable!("norms never produce"),
            }
        }
        for &a in &space.norms {
            if let UnitMut::Norm(n) = unit_mut(model, a) {
                n.retain(&mask);
            }
        }
        for &a in &space.consumers {
            match unit_mut(model, a) {
                UnitMut::Conv(c) => c.retain_inputs(&mask),
                UnitMut::Linear(l) => l.retain_inputs(&mask),
                UnitMut::Norm(_) => unreachable!("norms never consume"),
            }
        }
        for &s in &space.heads {
            model.heads_mut()[s].linear.retain_inputs(&mask);
        }
    }
    model.validate()
}

/// Zeroes every producer filter and norm channel of the planned structures
/// without changing any shape.
pub fn mask_structures(model: &mut TreeModel, removals: &[StructureRef]) -> Result<()> {
    let spaces = channel_spaces(model);
    for r in removals {
        let space = spaces
            .iter()
            .find(|s| s.prunable() && s.producers[0] == r.layer)
            .ok_or_else(|| invalid(format!("{:?} does not name a prunable layer", r.layer)))?;
        if r.filter >= space.width {
            return Err(invalid(format!("filter {} out of range", r.filter)));
        }
        for &a in space.members() {
            match unit_mut(model, a) {
                UnitMut::Conv(c) => c.zero_filter(r.filter),
                UnitMut::Linear(l) => l.zero_filter(r.filter),
                UnitMut::Norm(n) => n.zero_channel(r.filter),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dims, LayerSpec};
    use crate::task_split::SubtaskSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv(out: usize, stride: usize) -> LayerSpec {
        LayerSpec::Conv {
            out_channels: out,
            kernel: 3,
            stride,
            padding: None,
        }
    }

    fn model(specs: &[LayerSpec], m: usize, seed: u64) -> TreeModel {
        let groups = (0..m).map(|g| vec![2 * g, 2 * g + 1]).collect();
        let spec = SubtaskSpec::new(2 * m, groups, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TreeModel::init_shared(specs, Dims::new(2, 6, 6), &spec, &mut rng).unwrap()
    }

    fn score(layer: LayerAddr, filter: usize, submodel: usize, score: f64) -> ImportanceScore {
        ImportanceScore {
            structure: StructureRef { layer, filter },
            submodel,
            score,
        }
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_score(&[1.0, 2.0], &[0.5, -0.25]), 0.0);
        assert_eq!(importance_score(&[0.5], &[1.0]), 0.25);
    }

    #[test]
    fn residual_spaces_couple_producers() {
        let specs = vec![
            conv(4, 1),
            LayerSpec::Norm,
            LayerSpec::Relu,
            LayerSpec::Residual {
                out_channels: 4,
                stride: 1,
            },
            LayerSpec::Residual {
                out_channels: 6,
                stride: 2,
            },
            LayerSpec::GlobalAvgPool,
        ];
        let m = model(&specs, 2, 0);
        let spaces = channel_spaces(&m);
        // input, conv0 (+ identity residual conv2), res1 mid, res2 mid, res2 out
        assert_eq!(spaces.len(), 5);
        assert!(!spaces[0].prunable());
        assert_eq!(spaces[1].producers.len(), 2);
        assert_eq!(spaces[1].producers[1], LayerAddr::new(0, 3, Part::Conv2));
        assert_eq!(spaces[4].producers.len(), 2);
        assert_eq!(spaces[4].heads, vec![0, 1]);
        assert_eq!(prunable_filter_count(&m), 4 + 4 + 6 + 6);
    }

    #[test]
    fn identity_residual_on_the_input_is_not_prunable() {
        let specs = vec![
            LayerSpec::Residual {
                out_channels: 2,
                stride: 1,
            },
            LayerSpec::GlobalAvgPool,
        ];
        let m = model(&specs, 2, 4);
        let spaces = channel_spaces(&m);
        assert_eq!(spaces[0].producers, vec![LayerAddr::new(0, 0, Part::Conv2)]);
        assert!(!spaces[0].prunable());
        assert_eq!(prunable_filter_count(&m), 2);
        let conv2 = LayerAddr::new(0, 0, Part::Conv2);
        let scores = vec![vec![score(conv2, 0, 0, 0.0)], vec![score(conv2, 0, 1, 0.0)]];
        let plan = plan_prune(&scores, &m, 1).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn unshared_layer_drops_smallest_scores() {
        let m = model(&[conv(4, 1), LayerSpec::GlobalAvgPool], 1, 1);
        let a = LayerAddr::new(0, 0, Part::Main);
        let scores = vec![vec![
            score(a, 0, 0, 0.4),
            score(a, 1, 0, 0.1),
            score(a, 2, 0, 0.3),
            score(a, 3, 0, 0.2),
        ]];
        let plan = plan_prune(&scores, &m, 2).unwrap();
        let filters: Vec<usize> = plan.removals.iter().map(|r| r.filter).collect();
        assert_eq!(filters, vec![1, 3]);
        assert!(plan.flops_after < plan.flops_before);
    }

    #[test]
    fn shared_layer_takes_intersection_of_bottom_sets() {
        let m = model(&[conv(4, 1), LayerSpec::GlobalAvgPool], 2, 2);
        let a = LayerAddr::new(0, 0, Part::Main);
        let scores = vec![
            vec![score(a, 0, 0, 0.9), score(a, 1, 0, 0.1), score(a, 2, 0, 0.2), score(a, 3, 0, 0.8)],
            vec![score(a, 0, 1, 0.9), score(a, 1, 1, 0.8), score(a, 2, 1, 0.1), score(a, 3, 1, 0.2)],
        ];
        let plan = plan_prune(&scores, &m, 2).unwrap();
        assert_eq!(plan.removals, vec![StructureRef { layer: a, filter: 2 }]);
    }

    #[test]
    fn single_filter_layer_survives() {
        let m = model(&[conv(1, 1), LayerSpec::GlobalAvgPool], 1, 3);
        let a = LayerAddr::new(0, 0, Part::Main);
        let plan = plan_prune(&[vec![score(a, 0, 0, 0.0)]], &m, 3).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.flops_after, plan.flops_before);
    }

    #[test]
    fn pruned_forward_matches_masked_forward() {
        let specs = vec![
            conv(4, 1),
            LayerSpec::Norm,
            LayerSpec::Relu,
            LayerSpec::Residual {
                out_channels: 4,
                stride: 1,
            },
            LayerSpec::Residual {
                out_channels: 5,
                stride: 2,
            },
            LayerSpec::GlobalAvgPool,
        ];
        let mut m = model(&specs, 3, 4);
        m.split_at(0, 4, &[0, 1], &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for node in m.nodes_mut() {
            for l in &mut node.layers {
                for p in l.params_mut() {
                    for v in &mut p.value {
                        *v += rng.gen_range(-0.2..0.2);
                    }
                }
            }
        }
        let mut x = Tensor::zeros(Dims::new(2, 6, 6), 3);
        for v in &mut x.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let spaces = channel_spaces(&m);
        let removals: Vec<StructureRef> = spaces
            .iter()
            .filter(|s| s.prunable() && s.width > 1)
            .map(|s| StructureRef {
                layer: s.producers[0],
                filter: 1,
            })
            .collect();
        let mut masked = m.clone();
        mask_structures(&mut masked, &removals).unwrap();
        let expect = masked.forward(&x, Mode::Eval).unwrap().logits;
        let params_before = m.param_count();
        let plan = PrunePlan {
            removals,
            flops_before: m.flops(),
            flops_after: 0,
        };
        apply_prune(&mut m, &plan).unwrap();
        assert!(m.param_count() < params_before);
        let got = m.forward(&x, Mode::Eval).unwrap().logits;
        for (a, b) in got.iter().zip(&expect) {
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn apply_rejects_foreign_structures() {
        let mut m = model(&[conv(4, 1), LayerSpec::GlobalAvgPool], 1, 5);
        let bad = PrunePlan {
            removals: vec![StructureRef {
                layer: LayerAddr::new(0, 1, Part::Main),
                filter: 0,
            }],
            flops_before: 0,
            flops_after: 0,
        };
        assert!(apply_prune(&mut m, &bad).is_err());
        let all = PrunePlan {
            removals: (0..4)
                .map(|filter| StructureRef {
                    layer: LayerAddr::new(0, 0, Part::Main),
                    filter,
                })
                .collect(),
            flops_before: 0,
            flops_after: 0,
        };
        assert!(apply_prune(&mut m, &all).is_err());
    }
}
