use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::Dbgl;
use crate::codebook::{self, UtilizationReport};
use crate::data::{Dataset, Episode};
use crate::diffcore::{AdamState, Tape};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

/// Patience counter on a larger-is-better monitor.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    wait: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            wait: 0,
            seen: 0,
        }
    }

    /// Records one epoch's monitor value. Only a strict improvement resets
    /// the counter.
    pub fn observe(&mut self, value: f64) -> StopVerdict {
        self.seen += 1;
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = self.seen;
            self.wait = 0;
            return StopVerdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopVerdict::Stop
        } else {
            StopVerdict::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
    /// Value used for early stopping (larger is better).
    pub monitor: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: MetricsReport,
}

/// Validation AUPRC when defined; otherwise the negative loss. Multi-class
/// tasks use accuracy.
pub(crate) fn monitor_value(eval: &Evaluation) -> f64 {
    if let Some(m) = &eval.metrics.multiclass {
        if eval.metrics.auprc.is_none() && eval.metrics.n_pos == 0 && eval.metrics.n_neg == 0 {
            return m.accuracy;
        }
    }
    eval.metrics.auprc.unwrap_or(-eval.loss)
}

fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

impl<S: Scalar> Dbgl<S> {
    fn batches<'a>(&self, episodes: &'a [Episode], order: &[usize]) -> Vec<Vec<&'a Episode>> {
        order
            .chunks(self.config.batch_size)
            .map(|c| c.iter().map(|&i| &episodes[i]).collect())
            .collect()
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.n_vars() != self.n_vars {
            return Err(Error::Compatibility(format!(
                "dataset has {} variables, the model expects {}",
                data.n_vars(),
                self.n_vars
            )));
        }
        if data.n_classes > self.config.n_classes {
            return Err(Error::Compatibility(format!(
                "dataset has {} classes, the model predicts {}",
                data.n_classes, self.config.n_classes
            )));
        }
        Ok(())
    }

    /// Class probabilities `[N, C]` in dataset order. Inputs are used as
    /// given; apply [`Dbgl::norm`] beforehand when set.
    pub fn predict_proba(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        let order: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len() * self.config.n_classes);
        for batch in self.batches(&data.episodes, &order) {
            let logits: Vec<f64> = self.logits(&batch)?.iter().map(|x| x.widen()).collect();
            out.extend(softmax_rows(&logits, self.config.n_classes));
        }
        Ok(out)
    }

    /// Mean loss and metrics on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::Config("cannot evaluate an empty dataset".into()));
        }
        let probs = self.predict_proba(data)?;
        let labels = data.labels();
        let c = self.config.n_classes;
        let loss = probs
            .chunks(c)
            .zip(&labels)
            .map(|(row, &l)| -row[l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(Evaluation {
            loss,
            metrics: metrics::report(&probs, &labels, c)?,
        })
    }

    /// Soft utilization of the codebook over every fusion made on `data`.
    pub fn codebook_utilization(&self, data: &Dataset) -> Result<Option<UtilizationReport>> {
        if !self.flags.use_cb || data.is_empty() {
            return Ok(None);
        }
        self.check_dataset(data)?;
        let order: Vec<usize> = (0..data.len()).collect();
        let mut weights = Vec::new();
        for batch in self.batches(&data.episodes, &order) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let out = self.forward_on(&tape, &bound, &batch)?;
            for w in out.fusion_weights {
                weights.extend(tape.data(w).iter().map(|x| x.widen()));
            }
        }
        if weights.is_empty() {
            return Ok(None);
        }
        codebook::utilization(&weights, self.config.codebook_size).map(Some)
    }

    /// One pass of Adam over `train` in a seeded shuffled order; returns the
    /// sample-weighted mean loss.
    fn train_epoch(&mut self, train: &Dataset, adam: &mut AdamState<S>, rng: &mut rng::SeededRng) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(rng, &mut order);
        let mut total = 0.0;
        for batch in self.batches(&train.episodes, &order) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let loss = self.loss_on(&tape, &bound, &batch)?;
            let value = tape.item(loss)?.widen();
            if !value.is_finite() {
                return Err(Error::Data(format!("training loss became {value}")));
            }
            let grads = tape.backward(loss)?;
            self.params.zero_grad();
            self.params.accumulate(&grads, &bound)?;
            adam.step(&mut self.params)?;
            total += value * batch.len() as f64;
        }
        self.params.zero_grad();
        Ok(total / train.len() as f64)
    }

    /// Trains with early stopping on `val` and restores the best snapshot.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<TrainHistory> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training needs non-empty train and validation splits".into()));
        }
        self.check_dataset(train)?;
        self.check_dataset(val)?;
        let mut adam = AdamState::new(self.config.adam(), &self.params);
        let mut rng = rng::substream(self.config.seed, "shuffle");
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut best = self.params.clone();
        let mut history = TrainHistory::default();
        for epoch in 1..=self.config.epochs {
            let train_loss = self.train_epoch(train, &mut adam, &mut rng)?;
            let eval = self.evaluate(val)?;
            let monitor = monitor_value(&eval);
            let verdict = stopper.observe(monitor);
            if verdict == StopVerdict::Improved {
                best = self.params.clone();
            }
            debug!(
                "epoch {epoch}: train loss {train_loss:.5}, val loss {:.5}, monitor {monitor:.5}",
                eval.loss
            );
            history.epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss: eval.loss,
                val_metrics: eval.metrics,
                monitor,
                improved: verdict == StopVerdict::Improved,
            });
            if verdict == StopVerdict::Stop {
                history.stopped_early = true;
                break;
            }
        }
        history.best_epoch = stopper.best_epoch;
        info!(
            "trained {} epochs, best epoch {} (monitor {:?})",
            history.epochs.len(),
            history.best_epoch,
            stopper.best
        );
        self.params = best;
        Ok(history)
    }
}
