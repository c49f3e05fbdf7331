//! A single federated client running the alternating offset/model updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dualnet::{loss_batch, predict_batch, Alpha, ModelParams, Offset};
use crate::error::{Error, Result};
use crate::tensor::{sgd_step_in_place, Tensor};

/// Learning rates and minibatch size shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr_model: f64,
    pub lr_offset: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_model: 5e-3,
            lr_offset: 1e-3,
            batch_size: 16,
        }
    }
}

impl SgdConfig {
    /// Zero learning rates are accepted so that a round can be replayed
    /// without moving anything.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_model >= 0.0 && self.lr_offset >= 0.0)
            || !self.lr_model.is_finite()
            || !self.lr_offset.is_finite()
        {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got {} / {}",
                self.lr_model, self.lr_offset
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Offset,
    Model,
}

/// One SGD update recorded during a local round. `loss` is the batch loss
/// evaluated right before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub epoch: usize,
    pub batch: usize,
    pub kind: StepKind,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct LocalRoundResult {
    pub model: ModelParams,
    pub offset: Offset,
    /// Sample-weighted mean of the model-step batch losses.
    pub mean_train_loss: f64,
    pub samples_seen: usize,
    pub steps: Vec<StepEvent>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    inputs: Tensor,
    labels: Vec<usize>,
    offset: Offset,
    rng_seed: u64,
    rng: ChaCha8Rng,
    rounds_completed: usize,
}

impl ClientState {
    /// `inputs` is `[n x d]`; the offset starts at zero.
    pub fn new(id: usize, inputs: Tensor, labels: Vec<usize>, rng_seed: u64) -> Result<Self> {
        let (n, d) = match inputs.shape() {
            [n, d] => (*n, *d),
            s => {
                return Err(Error::dim(
                    "ClientState::new",
                    format!("inputs must be [n x d], got {s:?}"),
                ))
            }
        };
        if n == 0 {
            return Err(Error::Contract(format!("client {id} has no training data")));
        }
        if labels.len() != n {
            return Err(Error::dim(
                "ClientState::new",
                format!("{} labels for {n} samples", labels.len()),
            ));
        }
        Ok(ClientState {
            id,
            inputs,
            labels,
            offset: Offset::zeros(&[d]),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rounds_completed: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn offset(&self) -> &Offset {
        &self.offset
    }

    pub fn set_offset(&mut self, offset: Offset) -> Result<()> {
        if offset.shape() != self.offset.shape() {
            return Err(Error::dim(
                "set_offset",
                format!("{:?} vs {:?}", offset.shape(), self.offset.shape()),
            ));
        }
        self.offset = offset;
        Ok(())
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn rounds_completed(&self) -> usize {
        self.rounds_completed
    }

    /// Sorted distinct labels present in the local data.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Runs `epochs` passes over the local data starting from the global
    /// model and the offset the server dispatched. Each minibatch first
    /// takes an offset step with the model fixed, then a model step on the
    /// batch re-mixed with the updated offset.
    pub fn local_round(
        &mut self,
        global_model: &ModelParams,
        incoming_offset: &Offset,
        cfg: &SgdConfig,
        epochs: usize,
        alpha: Alpha,
    ) -> Result<LocalRoundResult> {
        cfg.validate()?;
        if epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if incoming_offset.shape() != self.offset.shape() {
            return Err(Error::dim(
                "local_round",
                format!(
                    "offset {:?} for inputs of width {:?}",
                    incoming_offset.shape(),
                    self.offset.shape()
                ),
            ));
        }
        let n = self.num_samples();
        let batch = cfg.batch_size.min(n);
        let round = self.rounds_completed;

        let mut model = global_model.clone();
        let mut offset = incoming_offset.tensor().clone();
        let mut order: Vec<usize> = (0..n).collect();
        let mut steps = Vec::with_capacity(2 * epochs * n.div_ceil(batch));
        let mut weighted_loss = 0.0;
        let mut seen = 0usize;
        let mut batch_index = 0usize;

        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            for idx in order.chunks(batch) {
                let xb = self.inputs.select_rows(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
                let check = |loss: f64| {
                    if loss.is_finite() {
                        Ok(())
                    } else {
                        Err(Error::NonFinite {
                            client: self.id,
                            round,
                            batch: batch_index,
                            loss,
                        })
                    }
                };

                let t_now = Offset::new(offset.clone()).map_err(|_| Error::NonFinite {
                    client: self.id,
                    round,
                    batch: batch_index,
                    loss: f64::NAN,
                })?;
                let offset_step = loss_batch(&model, &xb, &yb, &t_now, alpha)?;
                check(offset_step.loss)?;
                sgd_step_in_place(&mut offset, &offset_step.offset_grad, cfg.lr_offset)?;
                steps.push(StepEvent {
                    epoch,
                    batch: batch_index,
                    kind: StepKind::Offset,
                    loss: offset_step.loss,
                });

                let t_new = Offset::new(offset.clone()).map_err(|_| Error::NonFinite {
                    client: self.id,
                    round,
                    batch: batch_index,
                    loss: f64::NAN,
                })?;
                let model_step = loss_batch(&model, &xb, &yb, &t_new, alpha)?;
                check(model_step.loss)?;
                for (p, g) in model.tensors_mut().into_iter().zip(&model_step.param_grads) {
                    sgd_step_in_place(p, g, cfg.lr_model)?;
                }
                steps.push(StepEvent {
                    epoch,
                    batch: batch_index,
                    kind: StepKind::Model,
                    loss: model_step.loss,
                });

                weighted_loss += model_step.loss * idx.len() as f64;
                seen += idx.len();
                batch_index += 1;
            }
        }

        let offset = Offset::new(offset)?;
        self.offset = offset.clone();
        self.rounds_completed += 1;
        Ok(LocalRoundResult {
            model,
            offset,
            mean_train_loss: weighted_loss / seen as f64,
            samples_seen: seen,
            steps,
        })
    }

    /// Accuracy of `model` on a test set, mixing each input with this
    /// client's current offset.
    pub fn evaluate_local(
        &self,
        model: &ModelParams,
        alpha: Alpha,
        inputs: &Tensor,
        labels: &[usize],
    ) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Contract(format!(
                "client {} evaluated on an empty test set",
                self.id
            )));
        }
        let predicted = predict_batch(model, inputs, &self.offset, alpha)?;
        if predicted.len() != labels.len() {
            return Err(Error::dim(
                "evaluate_local",
                format!(
                    "{} predictions for {} labels",
                    predicted.len(),
                    labels.len()
                ),
            ));
        }
        let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}
