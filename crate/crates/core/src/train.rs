//! Toy training loop for micro-scale configs on the quadrant-blob task,
//! with loss-spike and NaN event logging.

use crate::error::{Error, Result};
use crate::model::{count_params, Model, ModelWeights, VariantConfig};
use crate::synthetic::{quadrant_blob_dataset, SyntheticSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optim: OptimKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub dataset: SyntheticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimKind::Adam,
            lr: 3e-3,
            steps: 500,
            batch: 8,
            seed: 0,
            dataset: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    /// Loss exceeded 5x the trailing mean.
    Spike {
        step: usize,
        loss: f64,
        trailing: f64,
    },
    /// Loss became non-finite; training halts gracefully.
    NonFinite { step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
    pub events: Vec<TrainEvent>,
    pub halted: bool,
    pub steps_run: usize,
}

const SPIKE_WINDOW: usize = 20;
const SPIKE_FACTOR: f64 = 5.0;

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    fn new(weights: &ModelWeights) -> Self {
        Adam {
            m: weights
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: weights
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &[Tensor], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((w, g), (m, v)) in weights
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..w.numel() {
                let gi = g.data()[i];
                let mi = B1 * m.data()[i] + (1.0 - B1) * gi;
                let vi = B2 * v.data()[i] + (1.0 - B2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                w.data_mut()[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

fn sgd_step(weights: &mut ModelWeights, grads: &[Tensor], lr: f64) {
    for (w, g) in weights.tensors.iter_mut().zip(grads) {
        for i in 0..w.numel() {
            w.data_mut()[i] -= lr * g.data()[i];
        }
    }
}

/// Train a micro-scale model on the quadrant-blob task. Returns the trained
/// model and the per-step metrics. A non-finite loss is recorded as an event
/// and halts training gracefully with partial metrics.
pub fn toy_train(cfg: &VariantConfig, tc: &TrainConfig) -> Result<(Model, TrainResult)> {
    if cfg.stages.len() > 2 {
        return Err(Error::argument(
            "toy_train",
            "micro-scale configs only (at most 2 stages)",
        ));
    }
    let params = count_params(cfg);
    if params > 50_000 {
        return Err(Error::argument(
            "toy_train",
            format!("micro-scale configs only ({params} params > 50k)"),
        ));
    }
    let (images, labels) = quadrant_blob_dataset(&tc.dataset, tc.seed);
    let mut model = Model::new(cfg.clone(), tc.seed)?;
    let mut adam = Adam::new(&model.weights);

    let mut losses = Vec::with_capacity(tc.steps);
    let mut events = Vec::new();
    let mut halted = false;
    let mut cursor = 0usize;

    for step in 0..tc.steps {
        let mut batch_imgs = Vec::with_capacity(tc.batch);
        let mut batch_labels = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            batch_imgs.push(images[cursor].clone());
            batch_labels.push(labels[cursor]);
            cursor = (cursor + 1) % images.len();
        }
        let (loss, grads) = model.loss_and_grads(&batch_imgs, &batch_labels)?;

        if !loss.is_finite() {
            events.push(TrainEvent::NonFinite { step });
            halted = true;
            break;
        }
        if losses.len() >= SPIKE_WINDOW {
            let trailing: f64 =
                losses[losses.len() - SPIKE_WINDOW..].iter().sum::<f64>() / SPIKE_WINDOW as f64;
            if loss > SPIKE_FACTOR * trailing {
                events.push(TrainEvent::Spike {
                    step,
                    loss,
                    trailing,
                });
            }
        }
        losses.push(loss);
        if grads.iter().any(|g| !g.all_finite()) {
            events.push(TrainEvent::NonFinite { step });
            halted = true;
            break;
        }
        match tc.optim {
            OptimKind::Adam => adam.step(&mut model.weights, &grads, tc.lr),
            OptimKind::Sgd => sgd_step(&mut model.weights, &grads, tc.lr),
        }
    }

    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(&labels) {
        if model.predict(img)? == label {
            correct += 1;
        }
    }
    let steps_run = losses.len();
    let result = TrainResult {
        losses,
        final_accuracy: correct as f64 / images.len() as f64,
        events,
        halted,
        steps_run,
    };
    Ok((model, result))
}
