//! Independent oracles and random model generators shared by the
//! integration tests.
#![allow(dead_code)]

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use split_ensemble::nn::{Dims, LayerSpec, Mode, Tensor};
use split_ensemble::task_split::{Objective, OodTargetMode, SubtaskSpec};
use split_ensemble::tree_model::TreeModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Class-balanced weights in 512-bit fixed point
// ---------------------------------------------------------------------------

const FRAC_BITS: u64 = 512;

/// Exact fixed-point image of a finite `x` in `[0, 1)`.
fn to_fixed(x: f64) -> BigUint {
    assert!((0.0..1.0).contains(&x));
    if x == 0.0 {
        return BigUint::zero();
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let (mant, e) = if exp == 0 {
        (bits & ((1 << 52) - 1), -1074)
    } else {
        ((bits & ((1 << 52) - 1)) | (1 << 52), exp - 1075)
    };
    let shift = FRAC_BITS as i64 + e;
    assert!(shift >= 0);
    BigUint::from(mant) << shift as u64
}

fn fixed_pow(base: &BigUint, mut m: u64) -> BigUint {
    let one = BigUint::one() << FRAC_BITS;
    let mut acc = one;
    let mut b = base.clone();
    while m > 0 {
        if m & 1 == 1 {
            acc = (&acc * &b) >> FRAC_BITS;
        }
        b = (&b * &b) >> FRAC_BITS;
        m >>= 1;
    }
    acc
}

/// `(1 - β) / (1 - β^m)` with β taken as the exact value of the f64.
pub fn cb_weight_oracle(beta: f64, m: u64) -> f64 {
    let one = BigUint::one() << FRAC_BITS;
    let b = to_fixed(beta);
    let num = &one - &b;
    let den = &one - fixed_pow(&b, m);
    let q = (num << FRAC_BITS) / den;
    // q carries FRAC_BITS fractional bits; keep the top 64 for the conversion
    let excess = q.bits().saturating_sub(64);
    let top = (q >> excess).to_f64().unwrap();
    top * 2f64.powi(excess as i32 - FRAC_BITS as i32)
}

// ---------------------------------------------------------------------------
// Graph and ranking oracles
// ---------------------------------------------------------------------------

/// Minimum over all bipartitions of the largest crossing edge weight.
pub fn brute_force_mct(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    let mut best = f64::INFINITY;
    // vertex n-1 always on side 0, so each cut is visited once
    for mask in 1u32..(1 << (n - 1)) {
        let mut worst = f64::NEG_INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let sa = mask >> a & 1;
                let sb = mask >> b & 1;
                if sa != sb {
                    worst = worst.max(w[a][b]);
                }
            }
        }
        best = best.min(worst);
    }
    best
}

pub fn random_graph(r: &mut impl Rng, n: usize, levels: Option<u32>) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; n]; n];
    for a in 0..n {
        w[a][a] = 1.0;
        for b in (a + 1)..n {
            let v = match levels {
                Some(l) => r.gen_range(0..=l) as f64 / l as f64,
                None => r.gen::<f64>(),
            };
            w[a][b] = v;
            w[b][a] = v;
        }
    }
    w
}

/// Pairs with the ID score above the OOD score plus half the ties, over all pairs.
pub fn brute_force_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut doubled: u64 = 0;
    for &a in id {
        for &b in ood {
            if a > b {
                doubled += 2;
            } else if a == b {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * id.len() * ood.len()) as f64
}

// ---------------------------------------------------------------------------
// Random tiny trees
// ---------------------------------------------------------------------------

pub struct TinyCase {
    pub model: TreeModel,
    pub objective: Objective,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

pub fn random_spec(r: &mut impl Rng) -> SubtaskSpec {
    let n = r.gen_range(3..=6);
    let splits = r.gen_range(2..=n.min(4));
    let mut classes: Vec<usize> = (0..n).collect();
    classes.shuffle(r);
    let mut groups = vec![Vec::new(); splits];
    for (i, c) in classes.into_iter().enumerate() {
        groups[if i < splits { i } else { r.gen_range(0..splits) }].push(c);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    SubtaskSpec::new(n, groups, r.gen_range(5..50)).unwrap()
}

pub fn random_backbone(r: &mut impl Rng, allow_residual: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let units = r.gen_range(1..=3);
    for _ in 0..units {
        let out_channels = r.gen_range(2..=4);
        let stride = r.gen_range(1..=2);
        if allow_residual && r.gen_bool(0.4) {
            layers.push(LayerSpec::Residual { out_channels, stride });
        } else {
            layers.push(LayerSpec::Conv {
                out_channels,
                kernel: 3,
                stride,
                padding: None,
            });
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

pub fn random_input(r: &mut impl Rng, dims: Dims, batch: usize) -> Tensor {
    let samples: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..dims.numel()).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    Tensor::from_samples(dims, &samples).unwrap()
}

/// Valid bipartition of `node`'s submodels that keeps each child on one side.
pub fn random_partition(r: &mut impl Rng, model: &TreeModel, node: usize) -> (Vec<usize>, Vec<usize>) {
    let n = model.node(node);
    let mut units: Vec<Vec<usize>> = if n.children.is_empty() {
        n.submodels.iter().map(|&s| vec![s]).collect()
    } else {
        n.children.iter().map(|&c| model.node(c).submodels.clone()).collect()
    };
    units.shuffle(r);
    let cut = r.gen_range(1..units.len());
    let mut first: Vec<usize> = units[..cut].concat();
    let mut second: Vec<usize> = units[cut..].concat();
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Nodes that can still be split.
pub fn splittable_nodes(model: &TreeModel) -> Vec<usize> {
    (0..model.nodes().len())
        .filter(|&id| {
            let n = model.node(id);
            let units = if n.is_leaf() { n.submodels.len() } else { n.children.len() };
            units >= 2 && !n.layers.is_empty()
        })
        .collect()
}

pub fn random_split(r: &mut impl Rng, model: &mut TreeModel) -> bool {
    let nodes = splittable_nodes(model);
    let Some(&node) = nodes.choose(r) else { return false };
    let layer = r.gen_range(0..model.node(node).layers.len());
    let (a, b) = random_partition(r, model, node);
    model.split_at(node, layer, &a, &b).unwrap();
    true
}

/// Jitters every parameter so biases and norm affines are not at their
/// initial values, then fills the running statistics from a few batches.
pub fn perturb(r: &mut impl Rng, model: &mut TreeModel) {
    model.visit_params(|p| {
        for v in &mut p.value {
            *v += r.gen_range(-0.3..0.3);
        }
    });
    let dims = model.input_dims();
    for _ in 0..3 {
        let x = random_input(r, dims, 6);
        let pass = model.forward(&x, Mode::Train).unwrap();
        model.commit_stats(&pass);
    }
}

pub fn tiny_case(seed: u64, allow_residual: bool, max_splits: usize) -> TinyCase {
    let mut r = rng(seed);
    let spec = random_spec(&mut r);
    let side = r.gen_range(5..=7);
    let dims = Dims::new(r.gen_range(1..=2), side, side);
    let backbone = random_backbone(&mut r, allow_residual);
    let mut model = TreeModel::init_shared(&backbone, dims, &spec, &mut r).unwrap();
    for _ in 0..r.gen_range(0..=max_splits) {
        random_split(&mut r, &mut model);
    }
    perturb(&mut r, &mut model);
    let mode = if r.gen_bool(0.5) {
        OodTargetMode::OodAware
    } else {
        OodTargetMode::OneHot
    };
    let objective = Objective::new(&spec, 0.99, true, r.gen_range(0.0..0.5), mode).unwrap();
    let batch = r.gen_range(3..=6);
    let x = random_input(&mut r, dims, batch);
    let labels = (0..batch).map(|_| r.gen_range(0..spec.total_classes())).collect();
    TinyCase {
        model,
        objective,
        x,
        labels,
    }
}

/// Largest absolute difference scaled by the largest magnitude of `a`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every head output flattened in head order.
pub fn flat_logits(model: &TreeModel, x: &Tensor, mode: Mode) -> Vec<f64> {
    model
        .forward(x, mode)
        .unwrap()
        .logits
        .iter()
        .flat_map(|t| t.data.clone())
        .collect()
}

/// Snapshot of every parameter value in visiting order.
pub fn param_values(model: &mut TreeModel) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit_params(|p| out.push(p.value.clone()));
    out
}

pub fn set_param(model: &mut TreeModel, tensor: usize, index: usize, value: f64) {
    let mut t = 0;
    model.visit_params(|p| {
        if t == tensor {
            p.value[index] = value;
        }
        t += 1;
    });
}
