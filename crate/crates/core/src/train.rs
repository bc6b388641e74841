//! Full-BPTT minibatch training and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, SpikeSequence, Splits};
use crate::error::{Error, Result};
use crate::loss::{argmax, AdamConfig, AdamState};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Stop early once training accuracy reaches this fraction.
    #[serde(default)]
    pub target_train_acc: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// `None` for networks without spiking layers.
    pub spikes_per_neuron_per_step: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,spikes_per_neuron_per_step,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let rate = self
            .spikes_per_neuron_per_step
            .map_or_else(|| "n/a".to_string(), |r| r.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, rate, self.wall_seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Test-set evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
    pub logits: Vec<Tensor>,
    /// Total spikes and neuron-timestep slots over all spiking layers.
    pub spikes: usize,
    pub slots: usize,
}

impl Evaluation {
    pub fn activity(&self) -> Option<f64> {
        (self.slots > 0).then(|| self.spikes as f64 / self.slots as f64)
    }
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut eval = Evaluation {
        accuracy: 0.0,
        mean_loss: 0.0,
        predictions: Vec::with_capacity(data.len()),
        logits: Vec::with_capacity(data.len()),
        spikes: 0,
        slots: 0,
    };
    let mut correct = 0;
    for s in &data.samples {
        let un = net.unroll(s.data())?;
        let logits = crate::loss::max_over_time(&un.readout)?;
        eval.mean_loss += crate::loss::cross_entropy(&logits, s.label())?;
        let pred = argmax(logits.data());
        correct += (pred == s.label()) as usize;
        eval.predictions.push(pred);
        eval.logits.push(logits);
        for rec in &un.spikes {
            eval.spikes += rec.data().iter().filter(|&&x| x == 1.0).count();
            eval.slots += rec.len();
        }
    }
    eval.accuracy = correct as f64 / data.len() as f64;
    eval.mean_loss /= data.len() as f64;
    Ok(eval)
}

/// Loss, prediction and parameter gradients (in canonical order) for one
/// sample.
pub fn sample_gradients(net: &Network, sample: &SpikeSequence) -> Result<(f64, usize, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let frames = net.frames(&mut tape, sample.data())?;
    let trace = net.unroll_graph(&mut tape, &bound, &frames)?;
    let logits = tape.max_over_time(&trace.readout)?;
    let pred = argmax(tape.value(logits).data());
    let loss = tape.cross_entropy(logits, sample.label())?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let per_param = bound.params.fields().into_iter().map(|(_, &id)| grads.take(id)).collect();
    Ok((value, pred, per_param))
}

/// Optimizer plus the shuffling stream; everything a run needs between
/// epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: &Network, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.optimizer, net.params().fields().into_iter().map(|(_, t)| t));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            adam,
            rng,
            epoch: 0,
        })
    }

    /// One pass over `data` in a freshly shuffled order. Returns mean loss
    /// and accuracy of the predictions made during the pass.
    pub fn epoch(&mut self, net: &mut Network, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total_loss = 0.0;
        let mut correct = 0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut sum: Vec<Tensor> = net
                .params()
                .fields()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &data.samples[i];
                let (loss, pred, grads) = sample_gradients(net, sample)?;
                batch_loss += loss;
                correct += (pred == sample.label()) as usize;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        acc.add_assign(&g);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    batch: b,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            total_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = sum.into_iter().map(|g| g.scale(inv)).collect();
            let mut fields = net.params_mut().fields_mut();
            let mut params: Vec<&mut Tensor> = fields.iter_mut().map(|(_, t)| &mut **t).collect();
            self.adam.update(&mut params, &grads)?;
        }
        Ok((total_loss / data.len() as f64, correct as f64 / data.len() as f64))
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each. When
/// the splits carry a resampler, every epoch after the first trains on a
/// fresh encoding of the training images. The
/// rows gathered so far are available to the callback even when a later
/// epoch diverges.
pub fn train(
    net: &mut Network,
    splits: &Splits,
    config: &TrainConfig,
    seed: u64,
    record_wall_time: bool,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let (train_set, test_set) = (&splits.train, &splits.test);
    if train_set.classes != net.classes() {
        return Err(Error::Config(format!(
            "network has {} classes, data has {}",
            net.classes(),
            train_set.classes
        )));
    }
    let mut trainer = Trainer::new(net, config.clone(), seed)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (train_loss, train_acc) = match &splits.resample {
            Some(r) if epoch > 1 => trainer.epoch(net, &r.epoch(epoch - 1)?)?,
            _ => trainer.epoch(net, train_set)?,
        };
        let eval = evaluate(net, test_set)?;
        let row = EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            test_acc: eval.accuracy,
            spikes_per_neuron_per_step: eval.activity(),
            wall_seconds: if record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&row);
        rows.push(row);
        if config.target_train_acc.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    Ok(rows)
}
