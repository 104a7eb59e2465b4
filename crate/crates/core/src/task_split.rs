//! Complementary subtask splitting, label conversion and training losses.
//!
//! The original `N`-way task is partitioned into disjoint class groups. Each
//! subtask `i` classifies its `K_i` classes plus one extra OOD slot (index
//! `K_i`) that absorbs every sample of the other groups. Losses:
//!
//! - class-balanced weights `(1-β)/(1-β^n)` for ID slots and
//!   `(1-β)/(1-β^{(N-K)n})` for the OOD slot,
//! - weighted sigmoid BCE per subtask,
//! - the joint objective `Σ_i L_CB^i + λ · CE(concatenated ID logits, y)`.
//!
//! A spec with a single group is the plain-classifier degenerate case: it has
//! no OOD slot and its subtask loss is softmax cross-entropy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::nn::Tensor;

/// Sigmoid outputs are clamped to `[EPS, 1 - EPS]` inside the BCE log terms.
pub const BCE_EPS: f64 = 1e-7;

pub const DEFAULT_BETA: f64 = 0.9999;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSubtaskSpec", into = "RawSubtaskSpec")]
pub struct SubtaskSpec {
    total_classes: usize,
    groups: Vec<Vec<usize>>,
    per_class_count: usize,
    // class id -> (subtask, position within group)
    lookup: Vec<(usize, usize)>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawSubtaskSpec {
    total_classes: usize,
    groups: Vec<Vec<usize>>,
    per_class_count: usize,
}

impl TryFrom<RawSubtaskSpec> for SubtaskSpec {
    type Error = Error;
    fn try_from(raw: RawSubtaskSpec) -> Result<Self> {
        SubtaskSpec::new(raw.total_classes, raw.groups, raw.per_class_count)
    }
}

impl From<SubtaskSpec> for RawSubtaskSpec {
    fn from(s: SubtaskSpec) -> Self {
        RawSubtaskSpec {
            total_classes: s.total_classes,
            groups: s.groups,
            per_class_count: s.per_class_count,
        }
    }
}

impl SubtaskSpec {
    pub fn new(total_classes: usize, groups: Vec<Vec<usize>>, per_class_count: usize) -> Result<Self> {
        if total_classes == 0 {
            return Err(invalid("total_classes must be at least 1"));
        }
        if groups.is_empty() {
            return Err(invalid("at least one class group is required"));
        }
        if per_class_count == 0 {
            return Err(invalid("per_class_count must be at least 1"));
        }
        let mut lookup = vec![(usize::MAX, 0); total_classes];
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(invalid(format!("class group {gi} is empty")));
            }
            for (pos, &c) in group.iter().enumerate() {
                if c >= total_classes {
                    return Err(invalid(format!(
                        "class id {c} in group {gi} is outside 0..{total_classes}"
                    )));
                }
                if lookup[c].0 != usize::MAX {
                    return Err(invalid(format!(
                        "class {c} appears in groups {} and {gi}",
                        lookup[c].0
                    )));
                }
                lookup[c] = (gi, pos);
            }
        }
        if let Some(missing) = lookup.iter().position(|&(g, _)| g == usize::MAX) {
            return Err(invalid(format!("class {missing} is not assigned to any group")));
        }
        Ok(Self {
            total_classes,
            groups,
            per_class_count,
            lookup,
        })
    }

    /// One group holding every class: the plain single-model classifier.
    pub fn single(total_classes: usize, per_class_count: usize) -> Result<Self> {
        Self::new(total_classes, vec![(0..total_classes).collect()], per_class_count)
    }

    /// Mean samples per class, rounded, for datasets that are not perfectly balanced.
    pub fn mean_class_count(labels: &[usize], total_classes: usize) -> usize {
        if total_classes == 0 {
            return 1;
        }
        ((labels.len() as f64 / total_classes as f64).round() as usize).max(1)
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn per_class_count(&self) -> usize {
        self.per_class_count
    }

    pub fn num_subtasks(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self, subtask: usize) -> usize {
        self.groups[subtask].len()
    }

    /// Subtasks carry an OOD slot whenever the task is actually split.
    pub fn has_ood_slot(&self) -> bool {
        self.groups.len() > 1
    }

    pub fn output_width(&self, subtask: usize) -> usize {
        self.group_size(subtask) + usize::from(self.has_ood_slot())
    }

    pub fn ood_slot(&self, subtask: usize) -> Option<usize> {
        self.has_ood_slot().then(|| self.group_size(subtask))
    }

    /// `(subtask, position within its group)` of an original class.
    pub fn locate(&self, class: usize) -> Result<(usize, usize)> {
        self.lookup
            .get(class)
            .copied()
            .ok_or_else(|| invalid(format!("label {class} outside 0..{}", self.total_classes)))
    }

    fn check_subtask(&self, subtask: usize) -> Result<()> {
        if subtask >= self.groups.len() {
            return Err(invalid(format!(
                "subtask index {subtask} outside 0..{}",
                self.groups.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodTargetMode {
    /// ID slots get `1/N`, the OOD slot `(N-K)/N`.
    #[default]
    OodAware,
    /// Plain one-hot on the OOD slot.
    OneHot,
}

/// Converted per-subtask label; entries are in `[0, 1]` and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetVector(Vec<f64>);

impl TargetVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn one_hot(width: usize, at: usize) -> Self {
        let mut v = vec![0.0; width];
        v[at] = 1.0;
        Self(v)
    }
}

impl From<Vec<f64>> for TargetVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn convert_label(
    spec: &SubtaskSpec,
    subtask: usize,
    original_label: usize,
    mode: OodTargetMode,
) -> Result<TargetVector> {
    spec.check_subtask(subtask)?;
    let (owner, pos) = spec.locate(original_label)?;
    let width = spec.output_width(subtask);
    if owner == subtask {
        return Ok(TargetVector::one_hot(width, pos));
    }
    let k = spec.group_size(subtask);
    Ok(match mode {
        OodTargetMode::OneHot => TargetVector::one_hot(width, k),
        OodTargetMode::OodAware => {
            let n = spec.total_classes as f64;
            let mut v = vec![1.0 / n; width];
            v[k] = (spec.total_classes - k) as f64 / n;
            TargetVector(v)
        }
    })
}

/// Per-slot loss weights of one subtask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalancedWeights {
    pub beta: f64,
    pub weights: Vec<f64>,
}

impl ClassBalancedWeights {
    pub fn uniform(width: usize) -> Self {
        Self {
            beta: 0.0,
            weights: vec![1.0; width],
        }
    }

    /// Rescaled so the weights sum to the number of slots; ratios are kept.
    pub fn normalized(&self) -> Self {
        let sum: f64 = self.weights.iter().sum();
        let scale = self.weights.len() as f64 / sum;
        Self {
            beta: self.beta,
            weights: self.weights.iter().map(|w| w * scale).collect(),
        }
    }
}

/// `(1 - β) / (1 - β^m)`, with `1 - β^m` evaluated as `-expm1(m · ln(1 - (1 - β)))`
/// so large `m` and `β` close to one keep full precision.
pub fn effective_number_weight(beta: f64, m: u64) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    let one_minus = 1.0 - beta;
    let denom = -((m as f64) * (-one_minus).ln_1p()).exp_m1();
    one_minus / denom
}

pub fn class_balanced_weights(
    spec: &SubtaskSpec,
    subtask: usize,
    beta: f64,
) -> Result<ClassBalancedWeights> {
    spec.check_subtask(subtask)?;
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid(format!("beta must be in [0, 1), got {beta}")));
    }
    let k = spec.group_size(subtask);
    let n = spec.per_class_count as u64;
    let mut weights = vec![effective_number_weight(beta, n); k];
    if spec.has_ood_slot() {
        let ood_count = (spec.total_classes - k) as u64 * n;
        weights.push(effective_number_weight(beta, ood_count));
    }
    Ok(ClassBalancedWeights { beta, weights })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted BCE of one sample and its gradient with respect to the logits.
///
/// The gradient is `w_i (σ(x_i) - y_i)`; the clamp only guards the log terms.
pub fn cb_bce_loss_with_grad(
    logits: &[f64],
    target: &TargetVector,
    weights: &ClassBalancedWeights,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() || logits.len() != weights.weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {}, target {}, weights {}",
            logits.len(),
            target.len(),
            weights.weights.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&x, &y), &w) in logits.iter().zip(target.values()).zip(&weights.weights) {
        let s = sigmoid(x);
        let sc = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= w * (y * sc.ln() + (1.0 - y) * (1.0 - sc).ln());
        grad.push(w * (s - y));
    }
    Ok((loss, grad))
}

pub fn cb_bce_loss(logits: &[f64], target: &TargetVector, weights: &ClassBalancedWeights) -> Result<f64> {
    cb_bce_loss_with_grad(logits, target, weights).map(|(l, _)| l)
}

/// Mean of [`cb_bce_loss`] over a batch.
pub fn cb_bce_loss_batch(
    logits: &[Vec<f64>],
    targets: &[TargetVector],
    weights: &ClassBalancedWeights,
) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (l, t) in logits.iter().zip(targets) {
        total += cb_bce_loss(l, t, weights)?;
    }
    Ok(total / logits.len() as f64)
}

/// Softmax cross-entropy and its gradient `softmax(x) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} outside {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// ID logits of all submodels placed at their original class ids.
pub fn concatenate_id_logits(spec: &SubtaskSpec, submodel_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    if submodel_logits.len() != spec.num_subtasks() {
        return Err(invalid(format!(
            "{} submodel outputs for {} subtasks",
            submodel_logits.len(),
            spec.num_subtasks()
        )));
    }
    let mut out = vec![0.0; spec.total_classes];
    for (i, (group, logits)) in spec.groups.iter().zip(submodel_logits).enumerate() {
        if logits.len() != spec.output_width(i) {
            return Err(Error::ShapeMismatch(format!(
                "submodel {i} gives {} logits, expected {}",
                logits.len(),
                spec.output_width(i)
            )));
        }
        for (pos, &c) in group.iter().enumerate() {
            out[c] = logits[pos];
        }
    }
    Ok(out)
}

/// `Σ_i L_CB^i + λ · CE(concatenated, label)` for one sample.
pub fn ensemble_loss(
    submodel_logits: &[Vec<f64>],
    converted_targets: &[TargetVector],
    weights: &[ClassBalancedWeights],
    concatenated_id_logits: &[f64],
    original_label: usize,
    lambda: f64,
) -> Result<f64> {
    if submodel_logits.len() != converted_targets.len() || submodel_logits.len() != weights.len() {
        return Err(invalid(format!(
            "{} submodel outputs, {} targets, {} weight sets",
            submodel_logits.len(),
            converted_targets.len(),
            weights.len()
        )));
    }
    if lambda < 0.0 {
        return Err(invalid("lambda must be non-negative"));
    }
    let mut total = 0.0;
    for ((l, t), w) in submodel_logits.iter().zip(converted_targets).zip(weights) {
        total += cb_bce_loss(l, t, w)?;
    }
    if lambda != 0.0 {
        total += lambda * softmax_cross_entropy(concatenated_id_logits, original_label)?.0;
    }
    Ok(total)
}

/// Batch value of the joint objective with gradients for every head output.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub subtask_losses: Vec<f64>,
    pub ce_loss: f64,
    /// Same shapes as the head outputs (`[width][batch]`), already divided by the batch size.
    pub grads: Vec<Tensor>,
}

/// The joint training objective with label conversion tables precomputed.
#[derive(Clone, Debug)]
pub struct Objective {
    spec: SubtaskSpec,
    weights: Vec<ClassBalancedWeights>,
    lambda: f64,
    // targets[subtask][class]
    targets: Vec<Vec<TargetVector>>,
}

impl Objective {
    pub fn new(
        spec: &SubtaskSpec,
        beta: f64,
        normalize_weights: bool,
        lambda: f64,
        mode: OodTargetMode,
    ) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let mut weights = Vec::new();
        let mut targets = Vec::new();
        for i in 0..spec.num_subtasks() {
            let w = class_balanced_weights(spec, i, beta)?;
            weights.push(if normalize_weights { w.normalized() } else { w });
            targets.push(
                (0..spec.total_classes)
                    .map(|c| convert_label(spec, i, c, mode))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            lambda,
            targets,
        })
    }

    pub fn spec(&self) -> &SubtaskSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[ClassBalancedWeights] {
        &self.weights
    }

    pub fn target(&self, subtask: usize, class: usize) -> &TargetVector {
        &self.targets[subtask][class]
    }

    fn check_output(&self, subtask: usize, out: &Tensor, batch: usize) -> Result<()> {
        if out.dims.channels != self.spec.output_width(subtask) || out.batch != batch {
            return Err(Error::ShapeMismatch(format!(
                "head {subtask} output {}x{} does not match width {} and batch {batch}",
                out.dims.channels,
                out.batch,
                self.spec.output_width(subtask)
            )));
        }
        Ok(())
    }

    fn column(out: &Tensor, b: usize) -> Vec<f64> {
        (0..out.dims.channels).map(|r| out.data[r * out.batch + b]).collect()
    }

    /// Batch-mean subtask loss `L_CB^i` (softmax CE for the unsplit task) and
    /// its gradient with respect to head `subtask`'s output.
    pub fn subtask_loss(&self, subtask: usize, out: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let bsz = labels.len();
        self.check_output(subtask, out, bsz)?;
        let mut grad = Tensor::zeros(out.dims, bsz);
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let logits = Self::column(out, b);
            let (l, g) = if self.spec.has_ood_slot() {
                let target = self
                    .targets
                    .get(subtask)
                    .and_then(|t| t.get(y))
                    .ok_or_else(|| invalid(format!("label {y} outside 0..{}", self.spec.total_classes)))?;
                cb_bce_loss_with_grad(&logits, target, &self.weights[subtask])?
            } else {
                let (_, pos) = self.spec.locate(y)?;
                softmax_cross_entropy(&logits, pos)?
            };
            loss += l;
            for (r, gv) in g.iter().enumerate() {
                grad.data[r * bsz + b] = gv / bsz as f64;
            }
        }
        Ok((loss / bsz as f64, grad))
    }

    pub fn evaluate(&self, outputs: &[Tensor], labels: &[usize]) -> Result<ObjectiveValue> {
        if outputs.len() != self.spec.num_subtasks() {
            return Err(invalid(format!(
                "{} head outputs for {} subtasks",
                outputs.len(),
                self.spec.num_subtasks()
            )));
        }
        if labels.is_empty() {
            return Err(invalid("empty batch"));
        }
        let bsz = labels.len();
        let mut grads = Vec::with_capacity(outputs.len());
        let mut subtask_losses = Vec::with_capacity(outputs.len());
        for (i, out) in outputs.iter().enumerate() {
            let (l, g) = self.subtask_loss(i, out, labels)?;
            subtask_losses.push(l);
            grads.push(g);
        }
        let mut ce_loss = 0.0;
        if self.lambda != 0.0 {
            for (b, &y) in labels.iter().enumerate() {
                let per_sub: Vec<Vec<f64>> = outputs.iter().map(|o| Self::column(o, b)).collect();
                let concat = concatenate_id_logits(&self.spec, &per_sub)?;
                let (l, g) = softmax_cross_entropy(&concat, y)?;
                ce_loss += l;
                for (c, gv) in g.iter().enumerate() {
                    let (sub, pos) = self.spec.lookup[c];
                    grads[sub].data[pos * bsz + b] += self.lambda * gv / bsz as f64;
                }
            }
            ce_loss /= bsz as f64;
        }
        let loss = subtask_losses.iter().sum::<f64>() + self.lambda * ce_loss;
        Ok(ObjectiveValue {
            loss,
            subtask_losses,
            ce_loss,
            grads,
        })
    }
}

// ---------------------------------------------------------------------------
// Class grouping
// ---------------------------------------------------------------------------

/// Class id → group name table, e.g. CIFAR-100 superclasses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingTable {
    pub entries: BTreeMap<usize, String>,
}

impl GroupingTable {
    /// Parses lines of `class_id,group_name` (comma or whitespace separated);
    /// blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once(',')
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| invalid(format!("grouping line {}: expected `id,group`", ln + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| invalid(format!("grouping line {}: bad class id {id:?}", ln + 1)))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(invalid(format!("grouping line {}: empty group name", ln + 1)));
            }
            if entries.insert(id, name.to_string()).is_some() {
                return Err(invalid(format!("grouping line {}: class {id} listed twice", ln + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum GroupingStrategy {
    /// Whole supergroups from a [`GroupingTable`] are assigned to subtasks.
    Semantic,
    /// Seeded shuffle of class ids, then near-equal chunks.
    Random,
    Explicit { groups: Vec<Vec<usize>> },
}

pub fn group_classes(
    total_classes: usize,
    per_class_count: usize,
    table: Option<&GroupingTable>,
    n_splits: usize,
    strategy: &GroupingStrategy,
    seed: u64,
) -> Result<SubtaskSpec> {
    if n_splits == 0 || n_splits > total_classes {
        return Err(invalid(format!(
            "n_splits must be in 1..={total_classes}, got {n_splits}"
        )));
    }
    let groups = match strategy {
        GroupingStrategy::Explicit { groups } => {
            if groups.len() != n_splits {
                return Err(invalid(format!(
                    "explicit grouping has {} groups but n_splits = {n_splits}",
                    groups.len()
                )));
            }
            groups.clone()
        }
        GroupingStrategy::Random => {
            let mut ids: Vec<usize> = (0..total_classes).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = total_classes / n_splits;
            let extra = total_classes % n_splits;
            let mut groups = Vec::with_capacity(n_splits);
            let mut start = 0;
            for g in 0..n_splits {
                let len = base + usize::from(g < extra);
                let mut chunk = ids[start..start + len].to_vec();
                chunk.sort_unstable();
                groups.push(chunk);
                start += len;
            }
            groups
        }
        GroupingStrategy::Semantic => {
            let table = table.ok_or_else(|| invalid("semantic grouping needs a grouping table"))?;
            semantic_groups(total_classes, table, n_splits)?
        }
    };
    SubtaskSpec::new(total_classes, groups, per_class_count)
}

fn semantic_groups(total: usize, table: &GroupingTable, n_splits: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((&bad, _)) = table.entries.iter().find(|(&c, _)| c >= total) {
        return Err(invalid(format!("grouping table names unknown class {bad}")));
    }
    // supergroups keyed by name, ordered by their smallest class id
    let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for c in 0..total {
        let name = table
            .entries
            .get(&c)
            .ok_or_else(|| invalid(format!("class {c} missing from grouping table")))?;
        by_name.entry(name.as_str()).or_default().push(c);
    }
    let mut supers: Vec<Vec<usize>> = by_name.into_values().collect();
    supers.sort_by_key(|s| s[0]);
    if supers.len() < n_splits {
        return Err(invalid(format!(
            "{} supergroups cannot fill {n_splits} subtasks",
            supers.len()
        )));
    }
    // largest supergroup first into the currently smallest bin
    let mut order: Vec<usize> = (0..supers.len()).collect();
    order.sort_by(|&a, &b| supers[b].len().cmp(&supers[a].len()).then(a.cmp(&b)));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_splits];
    for si in order {
        let target = (0..n_splits)
            .min_by_key(|&b| (bins[b].len(), b))
            .expect("n_splits >= 1");
        bins[target].extend_from_slice(&supers[si]);
    }
    for b in &mut bins {
        b.sort_unstable();
    }
    bins.sort_by_key(|b| b[0]);
    Ok(bins)
}
