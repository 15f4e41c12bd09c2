//! Deterministic AdamW training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{flipped_mask, Conversation, Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{predict, MetricsReport};
use crate::model::{forward, loss_and_grad, ModelConfig, ModelParams, ModelShape};
use crate::objective::LossReport;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    /// Learning rate and batch size used with large pretrained-feature
    /// corpora.
    pub fn large_corpus() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid_config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_config("epochs must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid_config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid_config("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid_config("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: TrainConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        AdamW {
            cfg: cfg.clone(),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = &self.cfg;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over training conversations.
    pub train: LossReport,
    pub val_w_acc: f64,
    pub val_w_f1: f64,
    pub best_val_w_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation W-F1.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// JSON-lines rendering of the log.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
            .collect()
    }
}

pub fn model_shape(corpus: &Corpus) -> ModelShape {
    ModelShape {
        dims: corpus.dims,
        n_classes: corpus.n_classes,
        n_speakers: corpus.n_speakers().max(1),
    }
}

/// Predictions for each conversation, in order.
pub fn predict_conversations(params: &ModelParams, cfg: &ModelConfig, convs: &[&Conversation]) -> Result<Vec<Vec<usize>>> {
    convs
        .iter()
        .map(|c| Ok(predict(forward(params, cfg, c)?.logits.view())))
        .collect()
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, convs: &[&Conversation], n_classes: usize) -> Result<MetricsReport> {
    let preds = predict_conversations(params, cfg, convs)?;
    let labels: Vec<usize> = convs.iter().flat_map(|c| c.labels()).collect();
    MetricsReport::from_predictions(&labels, &preds.concat(), n_classes)
}

/// Evaluation plus accuracy on utterances whose label disagrees with the
/// majority of their modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub flipped_acc: Option<f64>,
    pub n_flipped: usize,
}

pub fn evaluate_with_flips(
    params: &ModelParams,
    cfg: &ModelConfig,
    convs: &[&Conversation],
    n_classes: usize,
) -> Result<Evaluation> {
    let preds = predict_conversations(params, cfg, convs)?;
    let mut labels = Vec::new();
    let (mut hit, mut total) = (0usize, 0usize);
    for (conv, p) in convs.iter().zip(&preds) {
        let mask = flipped_mask(conv, n_classes);
        for (i, u) in conv.utterances.iter().enumerate() {
            labels.push(u.label);
            if mask[i] {
                total += 1;
                hit += (p[i] == u.label) as usize;
            }
        }
    }
    Ok(Evaluation {
        metrics: MetricsReport::from_predictions(&labels, &preds.concat(), n_classes)?,
        flipped_acc: (total > 0).then(|| hit as f64 / total as f64),
        n_flipped: total,
    })
}

fn mean_report(sum: &LossReport, count: usize) -> LossReport {
    let k = count.max(1) as f64;
    LossReport {
        ce: sum.ce / k,
        lfcl: sum.lfcl / k,
        hfcl: sum.hfcl / k,
        ccl: sum.ccl / k,
        total: sum.total / k,
        lambda_ccl: sum.lambda_ccl,
    }
}

/// Trains on the `train` split with early stopping on the `val` split.
/// `on_epoch` sees every log line as it is produced.
pub fn train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let train_set = corpus.split(Split::Train);
    let val_set = corpus.split(Split::Val);
    if train_set.is_empty() {
        return Err(Error::invalid_input("corpus has no training conversations"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid_input("corpus has no validation conversations"));
    }
    let shape = model_shape(corpus);
    let mut params = ModelParams::init(model_cfg, &shape, seed)?;
    let mut flat = params.to_flat();
    let mut opt = AdamW::new(train_cfg, flat.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossReport::new(0.0, 0.0, 0.0, model_cfg.effective_lambda());
        for (b, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut grad_flat = vec![0.0; flat.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let conv = train_set[i];
                let (report, grad) = loss_and_grad(&params, model_cfg, conv)?;
                if !report.total.is_finite() || !grad.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {b}, conversation '{}': {report:?}",
                        conv.id
                    )));
                }
                sum.ce += report.ce;
                sum.lfcl += report.lfcl;
                sum.hfcl += report.hfcl;
                sum.ccl += report.ccl;
                sum.total += report.total;
                let mut offset = 0;
                grad.visit("", &mut |_, _, data| {
                    for (g, v) in grad_flat[offset..offset + data.len()].iter_mut().zip(data) {
                        *g += v * scale;
                    }
                    offset += data.len();
                });
            }
            opt.step(&mut flat, &grad_flat);
            params.fill_from_flat(&flat);
        }
        let val = evaluate(&params, model_cfg, &val_set, corpus.n_classes)?;
        let improved = val.weighted_f1 > best.0;
        if improved {
            best = (val.weighted_f1, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train: mean_report(&sum, train_set.len()),
            val_w_acc: val.weighted_acc,
            val_w_f1: val.weighted_f1,
            best_val_w_f1: best.0,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}), val W-F1 {:.4}",
            entry.train.total,
            entry.train.ce,
            entry.val_w_f1
        );
        on_epoch(&entry);
        log.push(entry);
        if since_best >= train_cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        log,
        best_epoch: best.2,
    })
}
