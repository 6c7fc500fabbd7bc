//! Loss, optimisers, the seeded training loop, and per-epoch evaluation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{macro_pr_area, macro_roc_area, ClassCounts, ConfusionCounts};
use crate::model::Classifier;
use crate::noise::AttackSpec;
use crate::rng::{rng_for, Stream};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−log p[label]` and its gradient w.r.t. the softmax logits, `p − onehot(label)`.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probabilities.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            limit: probabilities.len(),
        });
    }
    let loss = -probabilities[label].max(PROB_FLOOR).ln();
    let mut grad = probabilities.to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Inclusive epoch window for summary statistics.
    pub window: (usize, usize),
    pub halt_on_nonfinite: bool,
    /// Draw fresh attack noise for every mini-batch instead of freezing it.
    pub resample_attack: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            window: (100, 300),
            halt_on_nonfinite: false,
            resample_attack: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.window.0 == 0 || self.window.0 > self.window.1 {
            return Err(Error::InvalidArgument(format!(
                "window [{}, {}] must be a non-empty range of 1-based epochs",
                self.window.0, self.window.1
            )));
        }
        Ok(())
    }

    /// The configured window clipped to the run length, if anything remains.
    pub fn effective_window(&self, epochs: usize) -> Option<(usize, usize)> {
        let hi = self.window.1.min(epochs);
        (self.window.0 <= hi).then_some((self.window.0, hi))
    }
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e−8.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, n_params)),
        }
    }

    /// Proposed parameters after one step. Internal state only advances
    /// when the proposal is finite; otherwise `None` and nothing changes.
    pub fn step(&mut self, params: &[f64], grad: &[f64]) -> Option<Vec<f64>> {
        match self {
            Optimizer::Sgd { lr } => {
                let next: Vec<f64> = params.iter().zip(grad).map(|(p, g)| p - *lr * g).collect();
                next.iter().all(|v| v.is_finite()).then_some(next)
            }
            Optimizer::Adam(a) => {
                let t = a.t + 1;
                let m: Vec<f64> = a.m.iter().zip(grad).map(|(m, g)| Adam::BETA1 * m + (1.0 - Adam::BETA1) * g).collect();
                let v: Vec<f64> = a.v.iter().zip(grad).map(|(v, g)| Adam::BETA2 * v + (1.0 - Adam::BETA2) * g * g).collect();
                let bc1 = 1.0 - Adam::BETA1.powi(t);
                let bc2 = 1.0 - Adam::BETA2.powi(t);
                let next: Vec<f64> = params
                    .iter()
                    .zip(m.iter().zip(&v))
                    .map(|(p, (m, v))| p - a.lr * (m / bc1) / ((v / bc2).sqrt() + Adam::EPS))
                    .collect();
                if next.iter().all(|x| x.is_finite()) {
                    a.m = m;
                    a.v = v;
                    a.t = t;
                    Some(next)
                } else {
                    None
                }
            }
        }
    }
}

/// Predictions and scores of one model over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionCounts,
    /// Class probabilities per sample (NaN rows for non-finite outputs).
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub predictions: Vec<Option<usize>>,
    pub mean_loss: f64,
    pub nonfinite: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy().unwrap_or(f64::NAN)
    }

    pub fn pr_area(&self) -> Option<f64> {
        if self.nonfinite > 0 {
            return None;
        }
        macro_pr_area(&self.scores, &self.labels, self.confusion.classes.len()).ok().flatten()
    }

    pub fn roc_area(&self) -> Option<f64> {
        if self.nonfinite > 0 {
            return None;
        }
        macro_roc_area(&self.scores, &self.labels, self.confusion.classes.len()).ok().flatten()
    }
}

fn argmax(p: &[f64]) -> Option<usize> {
    if p.iter().any(|v| !v.is_finite()) {
        return None;
    }
    p.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// One-vs-rest counts and raw scores. Samples whose forward pass turns
/// non-finite are kept as misses rather than aborting the evaluation.
pub fn evaluate<M: Classifier>(model: &M, data: &Dataset, pert: &M::Perturbation) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let c = model.num_classes();
    let mut scores = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let mut total_loss = 0.0;
    let mut nonfinite = 0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let p = match model.probabilities(x, pert) {
            Ok(p) => p,
            Err(Error::NonFinite(_)) => vec![f64::NAN; c],
            Err(e) => return Err(e),
        };
        let pred = argmax(&p);
        if pred.is_none() {
            nonfinite += 1;
            total_loss = f64::NAN;
        } else {
            total_loss += cross_entropy(&p, y)?.0;
        }
        predictions.push(pred);
        scores.push(p);
    }
    let confusion = ConfusionCounts::from_predictions(&data.labels, &predictions, c)?;
    Ok(Evaluation {
        confusion,
        scores,
        labels: data.labels.clone(),
        predictions,
        mean_loss: total_loss / data.len() as f64,
        nonfinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
    pub pr_area: Option<f64>,
    pub roc_area: Option<f64>,
    /// Norm of the batch-mean gradient restricted to the attacked
    /// parameters, averaged over the epoch's batches.
    pub attacked_grad: Option<f64>,
    pub rejected_updates: usize,
    pub nonfinite: bool,
    pub confusion: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub seed: u64,
    /// Mean training loss before any update.
    pub initial_train_loss: Option<f64>,
    pub epochs: Vec<EpochReport>,
    pub final_parameters: Vec<f64>,
    pub attacked_parameters: Vec<usize>,
    pub halted: bool,
}

impl RunRecord {
    pub fn any_nonfinite(&self) -> bool {
        self.epochs.iter().any(|e| e.nonfinite)
    }

    pub fn counts_by_epoch(&self) -> Vec<(usize, &ConfusionCounts)> {
        self.epochs.iter().map(|e| (e.epoch, &e.confusion)).collect()
    }

    /// Mean test accuracy over the inclusive epoch window.
    pub fn window_accuracy(&self, window: (usize, usize)) -> Option<f64> {
        let xs: Vec<f64> = self
            .epochs
            .iter()
            .filter(|e| (window.0..=window.1).contains(&e.epoch))
            .map(|e| e.accuracy)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn mean_loss<M: Classifier>(model: &M, data: &Dataset, pert: &M::Perturbation) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        match model.loss_and_gradient(x, y, pert) {
            Ok((l, _)) => total += l,
            Err(Error::NonFinite(_)) => return Ok(f64::NAN),
            Err(e) => return Err(e),
        }
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch training with per-epoch evaluation on `test`.
///
/// With an attack, every forward pass (training and evaluation) runs on the
/// perturbed model while the optimiser keeps updating the stored parameters.
pub fn train<M: Classifier>(model: &mut M, train: &Dataset, test: &Dataset, config: &TrainConfig, attack: Option<&AttackSpec>) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("train and test splits must be non-empty".into()));
    }
    if train.dim() != model.input_dim() || test.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: train.dim(),
        });
    }
    let mut attack = attack.cloned();
    let mut pert = match &attack {
        Some(a) => model.perturbation(a)?,
        None => M::Perturbation::default(),
    };
    let attacked = match &attack {
        Some(a) => model.attacked_parameters(a)?,
        None => Vec::new(),
    };
    let mut record = RunRecord {
        model: model.name(),
        seed: config.seed,
        initial_train_loss: None,
        epochs: Vec::with_capacity(config.epochs),
        final_parameters: model.parameters(),
        attacked_parameters: attacked.clone(),
        halted: false,
    };
    if config.epochs == 0 {
        return Ok(record);
    }
    record.initial_train_loss = Some(mean_loss(model, train, &pert)?);

    let mut shuffle_rng = rng_for(config.seed, Stream::Shuffle);
    let mut resample_rng = rng_for(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15), Stream::Attack);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.parameters().len());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut grad_norms = Vec::new();
        let mut rejected = 0;
        let mut nonfinite = false;
        for batch in order.chunks(config.batch_size) {
            if config.resample_attack {
                if let Some(a) = attack.as_mut() {
                    a.resample(&mut resample_rng)?;
                    pert = model.perturbation(a)?;
                }
            }
            let params = model.parameters();
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            let mut batch_ok = true;
            for &i in batch {
                match model.loss_and_gradient(&train.features[i], train.labels[i], &pert) {
                    Ok((l, g)) => {
                        batch_loss += l;
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Err(Error::NonFinite(_)) => {
                        batch_ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            batch_loss *= scale;
            batch_ok &= batch_loss.is_finite() && grad.iter().all(|g| g.is_finite());
            if !batch_ok {
                nonfinite = true;
                rejected += 1;
                loss_sum = f64::NAN;
                grad_norms.push(f64::NAN);
                continue;
            }
            loss_sum += batch_loss * batch.len() as f64;
            if !attacked.is_empty() {
                grad_norms.push(attacked.iter().map(|&k| grad[k] * grad[k]).sum::<f64>().sqrt());
            }
            match optimizer.step(&params, &grad) {
                Some(next) => model.set_parameters(&next)?,
                None => {
                    rejected += 1;
                    nonfinite = true;
                }
            }
        }
        let eval = evaluate(model, test, &pert)?;
        nonfinite |= eval.nonfinite > 0 || !eval.mean_loss.is_finite();
        let attacked_grad = (!attacked.is_empty()).then(|| grad_norms.iter().sum::<f64>() / grad_norms.len() as f64);
        record.epochs.push(EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_loss: eval.mean_loss,
            accuracy: eval.accuracy(),
            pr_area: eval.pr_area(),
            roc_area: eval.roc_area(),
            attacked_grad,
            rejected_updates: rejected,
            nonfinite,
            confusion: eval.confusion,
        });
        if nonfinite && config.halt_on_nonfinite {
            record.halted = true;
            break;
        }
    }
    record.final_parameters = model.parameters();
    Ok(record)
}

/// One row of the attacked-gradient log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradLogEntry {
    pub epoch: usize,
    pub magnitude: f64,
    /// `log10(magnitude)`; `−inf` for an exactly zero gradient.
    pub log10: f64,
    /// Set when the magnitude is zero or non-finite.
    pub flagged: bool,
}

/// Per-epoch magnitude of the loss gradient at the attacked parameters.
pub fn log_attacked_gradient(run: &RunRecord) -> Vec<GradLogEntry> {
    run.epochs
        .iter()
        .filter_map(|e| {
            e.attacked_grad.map(|g| {
                let log10 = if g == 0.0 { f64::NEG_INFINITY } else { g.log10() };
                GradLogEntry {
                    epoch: e.epoch,
                    magnitude: g,
                    log10,
                    flagged: !log10.is_finite(),
                }
            })
        })
        .collect()
}

/// Shortest round-trip decimal for finite values, `NaN`/`inf`/`-inf` otherwise.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("bad number '{s}': {e}")))
}

const FIXED_COLUMNS: [&str; 10] = [
    "epoch",
    "train_loss",
    "test_loss",
    "accuracy",
    "pr_area",
    "roc_area",
    "grad_attacked",
    "log10_grad_attacked",
    "rejected_updates",
    "nonfinite",
];

/// One CSV row per epoch. `extra` columns (e.g. provenance hashes) are
/// appended with the same value on every row.
pub fn write_epochs_csv<W: Write>(run: &RunRecord, n_classes: usize, extra: &[(&str, &str)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for y in 0..n_classes {
        for k in ["tp", "fp", "tn", "fn"] {
            header.push(format!("{k}_{y}"));
        }
    }
    header.extend(extra.iter().map(|(k, _)| k.to_string()));
    wtr.write_record(&header)?;
    for e in &run.epochs {
        let log10 = e.attacked_grad.map(|g| if g == 0.0 { f64::NEG_INFINITY } else { g.log10() });
        let mut row = vec![
            e.epoch.to_string(),
            fmt_f64(e.train_loss),
            fmt_f64(e.test_loss),
            fmt_f64(e.accuracy),
            fmt_opt(e.pr_area),
            fmt_opt(e.roc_area),
            fmt_opt(e.attacked_grad),
            fmt_opt(log10),
            e.rejected_updates.to_string(),
            e.nonfinite.to_string(),
        ];
        for c in &e.confusion.classes {
            row.extend([c.tp, c.fp, c.tn, c.fn_].iter().map(|v| v.to_string()));
        }
        row.extend(extra.iter().map(|(_, v)| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("epochs csv", e))?;
    Ok(())
}

/// Reads back the per-epoch columns written by [`write_epochs_csv`].
pub fn read_epochs_csv<R: Read>(r: R) -> Result<Vec<EpochReport>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("epochs csv lacks column '{name}'")))
    };
    let fixed: Vec<usize> = FIXED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut n_classes = 0;
    while headers.iter().any(|h| h == format!("tp_{n_classes}")) {
        n_classes += 1;
    }
    let class_cols: Vec<[usize; 4]> = (0..n_classes)
        .map(|y| Ok([col(&format!("tp_{y}"))?, col(&format!("fp_{y}"))?, col(&format!("tn_{y}"))?, col(&format!("fn_{y}"))?]))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| parse_opt(get(i)).map(|v| v.unwrap_or(f64::NAN));
        let int = |i: usize| {
            get(i)
                .parse::<u64>()
                .map_err(|e| Error::InvalidArgument(format!("bad count '{}': {e}", get(i))))
        };
        let classes = class_cols
            .iter()
            .map(|c| {
                Ok(ClassCounts {
                    tp: int(c[0])?,
                    fp: int(c[1])?,
                    tn: int(c[2])?,
                    fn_: int(c[3])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let samples = classes.first().map_or(0, |c| c.total());
        out.push(EpochReport {
            epoch: int(fixed[0])? as usize,
            train_loss: num(fixed[1])?,
            test_loss: num(fixed[2])?,
            accuracy: num(fixed[3])?,
            pr_area: parse_opt(get(fixed[4]))?,
            roc_area: parse_opt(get(fixed[5]))?,
            attacked_grad: parse_opt(get(fixed[6]))?,
            rejected_updates: int(fixed[8])? as usize,
            nonfinite: get(fixed[9]) == "true",
            confusion: ConfusionCounts { classes, samples },
        });
    }
    Ok(out)
}
