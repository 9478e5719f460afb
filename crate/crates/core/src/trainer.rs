//! The pre-training loop: initial label propagation, warm-up against the
//! fixed initial labels, then joint epochs in which attention-weighted label
//! propagation refreshes the pseudo-labels before every update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attlpa::{label_churn, propagate};
use crate::encoder::{
    backward_from, classify, cross_entropy_masked, forward_cached, AttentionMode, EmbeddingTable, EncoderConfig,
    ModelParams,
};
use crate::error::{Error, Result};
use crate::graph::{FeatureSet, HinGraph};
use crate::lpa::{lpa_init, PseudoLabels};
use crate::optim::{adam_step, sgd_step, AdamState, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub warmup_epochs: usize,
    /// Joint epochs after warm-up.
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Fraction of objects held out for model selection.
    pub validation_fraction: f64,
    pub lpa_max_iters: usize,
    pub optimizer: OptimizerKind,
    pub att_dim: Option<usize>,
    pub leaky_slope: f64,
    pub top_activation: bool,
    /// Abort when initial propagation leaves more labels than this.
    pub max_labels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            warmup_epochs: 20,
            max_epochs: 100,
            learning_rate: 5e-3,
            weight_decay: 1e-3,
            hidden_dim: 64,
            num_layers: 2,
            validation_fraction: 0.1,
            lpa_max_iters: crate::lpa::DEFAULT_MAX_ITERS,
            optimizer: OptimizerKind::Adam,
            att_dim: None,
            leaky_slope: 0.2,
            top_activation: true,
            max_labels: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("hidden_dim and num_layers must be positive");
        }
        if self.lpa_max_iters == 0 {
            return bad("lpa_max_iters must be >= 1");
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dims: vec![self.hidden_dim; self.num_layers],
            att_dim: self.att_dim,
            leaky_slope: self.leaky_slope,
            top_activation: self.top_activation,
            attention: AttentionMode::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Index within the phase.
    pub epoch: usize,
    /// Cross-entropy summed over training objects.
    pub loss: f64,
    /// Cross-entropy summed over held-out objects.
    pub validation_loss: f64,
    /// Fraction of labels changed by this epoch's propagation (0 in warm-up).
    pub churn: f64,
    /// Labels with at least one member after this epoch's propagation.
    pub occupied_labels: usize,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Joint epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub k: usize,
    pub lpa_iterations: usize,
    pub lpa_converged: bool,
    /// The last joint epoch changed no labels.
    pub converged: bool,
}

impl TrainReport {
    pub fn warmup(&self) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(|e| e.phase == Phase::Warmup)
    }

    pub fn joint(&self) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(|e| e.phase == Phase::Joint)
    }

    /// One JSON object per epoch, then a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "best_epoch": self.best_epoch,
                "k": self.k,
                "lpa_iterations": self.lpa_iterations,
                "lpa_converged": self.lpa_converged,
                "converged": self.converged,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Everything produced by [`pretrain`]. Parameters, embeddings and labels are
/// those of the selected (lowest validation loss) epoch.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub embeddings: EmbeddingTable,
    pub labels: PseudoLabels,
    pub initial_labels: PseudoLabels,
    pub report: TrainReport,
}

/// Seeded holdout mask: `true` marks validation objects.
pub fn validation_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let take = ((fraction * n as f64).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let mut mask = vec![false; n];
    for &i in &idx[..take] {
        mask[i] = true;
    }
    mask
}

struct Stepper {
    kind: OptimizerKind,
    adam: AdamState,
    lr: f64,
    wd: f64,
}

impl Stepper {
    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, &mut self.adam, self.lr, self.wd),
            OptimizerKind::Sgd => sgd_step(params, grads, self.lr, self.wd),
        }
    }
}

struct Best {
    validation_loss: f64,
    epoch: usize,
    params: ModelParams,
    table: EmbeddingTable,
    labels: PseudoLabels,
}

struct EpochEval {
    loss: f64,
    validation_loss: f64,
    table: EmbeddingTable,
    grads: ModelParams,
}

fn evaluate(
    params: &ModelParams,
    graph: &HinGraph,
    features: &FeatureSet,
    labels: &PseudoLabels,
    train_mask: &[bool],
    val_mask: &[bool],
) -> Result<EpochEval> {
    let table = forward_cached(params, graph, features)?;
    evaluate_with(params, graph, features, table, labels, train_mask, val_mask)
}

fn evaluate_with(
    params: &ModelParams,
    graph: &HinGraph,
    features: &FeatureSet,
    table: EmbeddingTable,
    labels: &PseudoLabels,
    train_mask: &[bool],
    val_mask: &[bool],
) -> Result<EpochEval> {
    let (loss, grads) = backward_from(params, graph, features, &table, labels, Some(train_mask))?;
    let validation_loss = cross_entropy_masked(&classify(params, &table)?, labels, Some(val_mask))?;
    if !loss.is_finite() || !validation_loss.is_finite() {
        return Err(Error::NonFiniteGradient {
            tensor: "loss".into(),
            index: 0,
        });
    }
    Ok(EpochEval {
        loss,
        validation_loss,
        table,
        grads,
    })
}

/// Numerical failures become `Diverged` carrying the newest finite parameters.
fn diverged(err: Error, epoch: usize, current: &ModelParams, best: Option<&Best>) -> Error {
    if !matches!(err, Error::NonFiniteActivation { .. } | Error::NonFiniteGradient { .. }) {
        return err;
    }
    let last_finite = if current.is_finite() {
        current.clone()
    } else if let Some(b) = best {
        b.params.clone()
    } else {
        return err;
    };
    Error::Diverged {
        epoch,
        last_finite: Box::new(last_finite),
    }
}

pub fn pretrain(graph: &HinGraph, features: &FeatureSet, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let n = graph.num_objects();

    let lpa = lpa_init(graph, config.seed, config.lpa_max_iters)?;
    let k = lpa.labels.k();
    if k > config.max_labels {
        return Err(Error::TooManyLabels {
            k,
            cap: config.max_labels,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut params = ModelParams::xavier(graph.schema(), &features.dims(), config.encoder_config(), k, &mut rng)?;
    let val_mask = validation_mask(n, config.validation_fraction, config.seed);
    let train_mask: Vec<bool> = val_mask.iter().map(|v| !v).collect();
    let mut stepper = Stepper {
        kind: config.optimizer,
        adam: AdamState::new(&params),
        lr: config.learning_rate,
        wd: config.weight_decay,
    };

    let mut epochs = Vec::with_capacity(config.warmup_epochs + config.max_epochs);
    let initial = lpa.labels.clone();
    let occupied = initial.num_occupied();

    for epoch in 0..config.warmup_epochs {
        let start = Instant::now();
        let step = evaluate(&params, graph, features, &initial, &train_mask, &val_mask)
            .map_err(|e| diverged(e, epoch, &params, None))?;
        stepper.step(&mut params, &step.grads)?;
        epochs.push(EpochRecord {
            phase: Phase::Warmup,
            epoch,
            loss: step.loss,
            validation_loss: step.validation_loss,
            churn: 0.0,
            occupied_labels: occupied,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let mut labels = initial.clone();
    let mut best: Option<Best> = None;
    let mut last_churn = 1.0;
    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let at = config.warmup_epochs + epoch;
        let table = forward_cached(&params, graph, features).map_err(|e| diverged(e, at, &params, best.as_ref()))?;
        let snapshot = table.attention(graph);
        let next = propagate(&snapshot, graph, &labels, params.num_layers())?;
        last_churn = label_churn(&labels, &next)?;
        labels = next;

        let step = evaluate_with(&params, graph, features, table, &labels, &train_mask, &val_mask)
            .map_err(|e| diverged(e, at, &params, best.as_ref()))?;
        if best.as_ref().is_none_or(|b| step.validation_loss < b.validation_loss) {
            best = Some(Best {
                validation_loss: step.validation_loss,
                epoch,
                params: params.clone(),
                table: step.table.clone(),
                labels: labels.clone(),
            });
        }
        stepper.step(&mut params, &step.grads)?;
        epochs.push(EpochRecord {
            phase: Phase::Joint,
            epoch,
            loss: step.loss,
            validation_loss: step.validation_loss,
            churn: last_churn,
            occupied_labels: labels.num_occupied(),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let best = best.expect("max_epochs >= 1");
    Ok(TrainOutput {
        params: best.params,
        embeddings: best.table,
        labels: best.labels,
        initial_labels: initial,
        report: TrainReport {
            epochs,
            best_epoch: best.epoch,
            k,
            lpa_iterations: lpa.iterations,
            lpa_converged: lpa.converged,
            converged: last_churn == 0.0,
        },
    })
}
