//! Joint training with interleaved splitting and pruning.
//!
//! Every epoch runs SGD on the joint objective. From the end of warmup on,
//! every `prune_interval` epochs the trainer first tries one split, then
//! prunes while the model exceeds its FLOPs budget. Once every submodel has
//! a private branch and the budget holds, the architecture is frozen.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, io_err, Error, Result};
use crate::inference::{predict, predict_all};
use crate::nn::Mode;
use crate::pruning::{all_importances, apply_prune, n_remove_for, plan_prune, DEFAULT_PRUNE_FRACTION};
use crate::sensitivity::{find_split, snip_sensitivity, LayerCorrelation, DEFAULT_MCT_THRESHOLD, DEFAULT_TOPK};
use crate::task_split::{Objective, OodTargetMode, SubtaskSpec, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::tree_model::TreeModel;

pub const CHECKPOINT_SCHEMA: &str = "split-ensemble/checkpoint/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Rescale class-balanced weights to sum to the subtask width.
    pub normalize_cb_weights: bool,
    pub mct_threshold: f64,
    pub k_fraction: f64,
    pub prune_interval: usize,
    /// Filters removed per prune round; `None` derives it from `prune_fraction`.
    pub n_remove: Option<usize>,
    pub prune_fraction: f64,
    /// Prune rounds per architecture step; `None` prunes until the budget holds.
    pub max_prune_rounds: Option<usize>,
    /// `None` keeps the model's own budget (the unsplit backbone).
    pub flops_budget: Option<u64>,
    /// Samples in the batch used for sensitivity and importance.
    pub sensitivity_batch: usize,
    pub seed: u64,
    pub ood_target_mode: OodTargetMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 10,
            lr: 0.1,
            min_lr: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            normalize_cb_weights: true,
            mct_threshold: DEFAULT_MCT_THRESHOLD,
            k_fraction: DEFAULT_TOPK,
            prune_interval: 5,
            n_remove: None,
            prune_fraction: DEFAULT_PRUNE_FRACTION,
            max_prune_rounds: Some(1),
            flops_budget: None,
            sensitivity_batch: 256,
            seed: 0,
            ood_target_mode: OodTargetMode::OodAware,
        }
    }
}

impl TrainConfig {
    /// Lists every offending key.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str, why: &str| {
            if !ok {
                bad.push(format!("{key}: {why}"));
            }
        };
        check(self.epochs >= 1, "epochs", "must be at least 1");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive");
        check(self.min_lr >= 0.0 && self.min_lr <= self.lr, "min_lr", "must be in [0, lr]");
        check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)");
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", "must be >= 0");
        check(self.batch_size >= 1, "batch_size", "must be at least 1");
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be >= 0");
        check((0.0..1.0).contains(&self.beta), "beta", "must be in [0, 1)");
        check(self.mct_threshold >= 0.0 && self.mct_threshold.is_finite(), "mct_threshold", "must be >= 0");
        check(self.k_fraction > 0.0 && self.k_fraction <= 1.0, "k_fraction", "must be in (0, 1]");
        check(self.prune_interval >= 1, "prune_interval", "must be at least 1");
        check(self.n_remove != Some(0), "n_remove", "must be at least 1");
        check(self.prune_fraction > 0.0 && self.prune_fraction <= 1.0, "prune_fraction", "must be in (0, 1]");
        check(self.max_prune_rounds != Some(0), "max_prune_rounds", "must be at least 1");
        check(self.flops_budget != Some(0), "flops_budget", "must be positive");
        check(self.sensitivity_batch >= 1, "sensitivity_batch", "must be at least 1");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { keys: bad })
        }
    }

    /// Learning rate at a fractional epoch position `t` in `[0, epochs)`:
    /// linear warmup, then cosine decay to `min_lr`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        if t < w {
            return self.lr * (t + 1.0).min(w) / w;
        }
        let span = (self.epochs as f64 - w).max(1.0);
        let progress = ((t - w) / span).clamp(0.0, 1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn objective(&self, spec: &SubtaskSpec) -> Result<Objective> {
        Objective::new(spec, self.beta, self.normalize_cb_weights, self.lambda, self.ood_target_mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub subtask_losses: Vec<f64>,
    pub ce_loss: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub flops: u64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub epoch: usize,
    pub node: usize,
    pub layer: usize,
    pub depth: usize,
    pub mct: f64,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub round: usize,
    pub n_remove: usize,
    pub removed: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Epoch(EpochRecord),
    /// Per-layer correlation profile scanned at an architecture step.
    Correlation { epoch: usize, layers: Vec<LayerCorrelation> },
    Split(SplitEvent),
    Prune(PruneEvent),
    Frozen { epoch: usize, flops: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub events: Vec<Event>,
}

impl History {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.events.iter().filter_map(|e| match e {
            Event::Epoch(r) => Some(r),
            _ => None,
        })
    }

    pub fn splits(&self) -> impl Iterator<Item = &SplitEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Split(s) => Some(s),
            _ => None,
        })
    }

    pub fn prunes(&self) -> impl Iterator<Item = &PruneEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Prune(p) => Some(p),
            _ => None,
        })
    }

    /// Split and prune events only, in order.
    pub fn architecture_events(&self) -> Vec<&Event> {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Split(_) | Event::Prune(_)))
            .collect()
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { events })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config: TrainConfig,
    pub model: TreeModel,
    pub history: History,
    pub next_epoch: usize,
    pub frozen: bool,
}

/// Resumable training state.
pub struct Trainer {
    pub model: TreeModel,
    pub config: TrainConfig,
    pub history: History,
    objective: Objective,
    next_epoch: usize,
    frozen: bool,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(epoch as u128 * (1 << 32));
    rng
}

impl Trainer {
    pub fn new(mut model: TreeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if let Some(b) = config.flops_budget {
            model.set_flops_budget(b);
        }
        let objective = config.objective(model.spec())?;
        Ok(Self {
            model,
            config,
            history: History::default(),
            objective,
            next_epoch: 1,
            frozen: false,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch > self.config.epochs
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dims != self.model.input_dims() {
            return Err(Error::ShapeMismatch(format!(
                "data {} does not match model input {}",
                data.dims,
                self.model.input_dims()
            )));
        }
        let n = self.model.spec().total_classes();
        if let Some(&l) = data.labels.iter().find(|&&l| l >= n) {
            return Err(invalid(format!("label {l} outside 0..{n}")));
        }
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        Ok(())
    }

    /// Runs all remaining epochs, reporting each event as it happens.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_event: impl FnMut(&Event)) -> Result<()> {
        while !self.is_done() {
            let start = self.history.events.len();
            self.run_epoch(train, val)?;
            for e in &self.history.events[start..] {
                on_event(e);
            }
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        if self.is_done() {
            return Err(invalid("all epochs already ran"));
        }
        self.check_data(train)?;
        let epoch = self.next_epoch;
        let cfg = self.config.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let steps = order.len().div_ceil(cfg.batch_size);
        let m = self.model.num_submodels();
        let (mut loss_sum, mut ce_sum, mut sub_sum) = (0.0, 0.0, vec![0.0; m]);
        let mut correct = 0usize;
        let mut lr = cfg.lr;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk)?;
            let pass = self.model.forward(&x, Mode::Train)?;
            let value = self.objective.evaluate(&pass.logits, &labels)?;
            if !value.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: value.loss,
                });
            }
            let w = chunk.len() as f64;
            loss_sum += value.loss * w;
            ce_sum += value.ce_loss * w;
            for (s, l) in sub_sum.iter_mut().zip(&value.subtask_losses) {
                *s += l * w;
            }
            for (b, &label) in labels.iter().enumerate() {
                if predict(&pass.sample_logits(b), self.model.spec())?.predicted_class == label {
                    correct += 1;
                }
            }
            self.model.zero_grad();
            let grads: Vec<_> = value.grads.iter().map(Some).collect();
            self.model.backward(&pass, &grads)?;
            self.model.commit_stats(&pass);
            lr = cfg.lr_at((epoch - 1) as f64 + step as f64 / steps as f64);
            sgd_step(&mut self.model, lr, cfg.momentum, cfg.weight_decay);
        }
        let n = train.len() as f64;
        let val_accuracy = match val {
            Some(v) => Some(self.accuracy(v)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / n,
            subtask_losses: sub_sum.iter().map(|s| s / n).collect(),
            ce_loss: ce_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
            flops: self.model.flops(),
            params: self.model.param_count(),
        };
        info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} flops {}",
            record.loss, record.train_accuracy, record.flops
        );
        self.history.events.push(Event::Epoch(record));
        if !self.frozen
            && epoch >= cfg.warmup_epochs
            && epoch % cfg.prune_interval == 0
            && epoch < cfg.epochs
        {
            self.architecture_step(epoch, train)?;
        }
        self.next_epoch += 1;
        Ok(())
    }

    /// One split attempt followed by pruning toward the budget.
    fn architecture_step(&mut self, epoch: usize, train: &Dataset) -> Result<()> {
        let cfg = &self.config;
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut epoch_rng(cfg.seed, epoch, 1));
        idx.truncate(cfg.sensitivity_batch);
        idx.sort_unstable();
        let (x, labels) = train.batch(&idx)?;

        if !self.model.fully_split() {
            let sens = snip_sensitivity(&mut self.model, &self.objective, &x, &labels)?;
            let search = find_split(&self.model, &sens, cfg.k_fraction, cfg.mct_threshold)?;
            self.history.events.push(Event::Correlation {
                epoch,
                layers: search.profile,
            });
            if let Some(d) = search.decision {
                let flops_before = self.model.flops();
                self.model.split_at(d.node, d.layer, &d.first, &d.second)?;
                let flops_after = self.model.flops();
                info!(
                    "epoch {epoch}: split node {} layer {} (mct {:.3}) into {:?} / {:?}",
                    d.node, d.layer, d.mct, d.first, d.second
                );
                self.history.events.push(Event::Split(SplitEvent {
                    epoch,
                    node: d.node,
                    layer: d.layer,
                    depth: d.depth,
                    mct: d.mct,
                    first: d.first,
                    second: d.second,
                    flops_before,
                    flops_after,
                }));
            }
        }

        let mut round = 0;
        while self.model.flops() > self.model.flops_budget()
            && self.config.max_prune_rounds.map_or(true, |r| round < r)
        {
            round += 1;
            let n_remove = self
                .config
                .n_remove
                .unwrap_or_else(|| n_remove_for(&self.model, self.config.prune_fraction));
            let scores = all_importances(&mut self.model, &self.objective, &x, &labels)?;
            let plan = plan_prune(&scores, &self.model, n_remove)?;
            if plan.is_empty() {
                warn!(
                    "epoch {epoch}: no filter is in every sharing submodel's bottom set; {} FLOPs over budget {}",
                    self.model.flops(),
                    self.model.flops_budget()
                );
                break;
            }
            apply_prune(&mut self.model, &plan)?;
            debug_assert_eq!(self.model.flops(), plan.flops_after);
            self.history.events.push(Event::Prune(PruneEvent {
                epoch,
                round,
                n_remove,
                removed: plan.removals.len(),
                flops_before: plan.flops_before,
                flops_after: plan.flops_after,
            }));
        }
        if self.model.fully_split() && self.model.flops() <= self.model.flops_budget() {
            self.frozen = true;
            info!("epoch {epoch}: architecture frozen at {} FLOPs", self.model.flops());
            self.history.events.push(Event::Frozen {
                epoch,
                flops: self.model.flops(),
            });
        }
        Ok(())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let out = predict_all(&self.model, &data.images, self.config.batch_size.max(64))?;
        let hits = out
            .iter()
            .zip(&data.labels)
            .filter(|(o, &l)| o.predicted_class == l)
            .count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config: self.config.clone(),
            model: self.model.clone(),
            history: self.history.clone(),
            next_epoch: self.next_epoch,
            frozen: self.frozen,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint())?;
        fs::write(path, text).map_err(io_err(path))
    }

    /// Rebuilds a trainer from a checkpoint, optionally requiring a subtask split.
    pub fn from_checkpoint(ck: Checkpoint, expected: Option<&SubtaskSpec>) -> Result<Self> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Validation(format!(
                "schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
                ck.schema
            )));
        }
        if let Some(spec) = expected {
            if spec != ck.model.spec() {
                return Err(Error::Validation("checkpoint was trained on a different subtask split".into()));
            }
        }
        ck.config.validate()?;
        ck.model
            .validate()
            .map_err(|e| Error::Validation(format!("stored model is inconsistent: {e}")))?;
        let objective = ck.config.objective(ck.model.spec())?;
        let mut model = ck.model;
        model.zero_grad();
        Ok(Self {
            model,
            config: ck.config,
            history: ck.history,
            objective,
            next_epoch: ck.next_epoch,
            frozen: ck.frozen,
        })
    }

    pub fn restore(path: &Path, expected: Option<&SubtaskSpec>) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?, expected)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
pub fn sgd_step(model: &mut TreeModel, lr: f64, momentum: f64, weight_decay: f64) {
    model.visit_params(|p| {
        if p.grad.len() != p.value.len() {
            p.zero_grad();
        }
        for ((w, m), g) in p.value.iter_mut().zip(p.momentum.iter_mut()).zip(&p.grad) {
            let d = g + weight_decay * *w;
            *m = momentum * *m + d;
            *w -= lr * *m;
        }
    });
}

/// Trains `model` from scratch and returns it with its history.
pub fn train(
    model: TreeModel,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(TreeModel, History)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(train_set, val, |_| {})?;
    Ok((t.model, t.history))
}
