use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, LmError};
use crate::tokenizer::TokenId;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global L2-norm clip applied to the batch gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 10, seed: 0, grad_clip: Some(1.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LmError::TrainConfig(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LmError::TrainConfig("batch_size must be positive".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(LmError::TrainConfig(format!("grad_clip {clip} must be positive")));
            }
        }
        Ok(())
    }
}

/// A token sequence and the positions whose prediction counts toward the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    pub fn full(tokens: Vec<TokenId>) -> Self {
        let loss_mask = vec![true; tokens.len()];
        TrainExample { tokens, loss_mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

pub fn train(ckpt: &Checkpoint, corpus: &[TrainExample], cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport), LmError> {
    train_with(ckpt, corpus, cfg, |_| {})
}

/// Mini-batch Adam over a reshuffled corpus each epoch. `on_epoch` sees the
/// mean batch loss of every finished epoch.
pub fn train_with(
    ckpt: &Checkpoint,
    corpus: &[TrainExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainReport), LmError> {
    cfg.validate()?;
    let mut model = ckpt.clone();
    let mut report = TrainReport::default();
    if corpus.is_empty() || cfg.epochs == 0 {
        return Ok((model, report));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(model.num_parameters());
    let mut grad = vec![0.0; model.num_parameters()];
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &corpus[i];
                batch_loss += model.accumulate_grad(&ex.tokens, &ex.loss_mask, Some(&mut dropout_rng), &mut grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(LmError::Divergence { step: model.training_step });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            if cfg.learning_rate > 0.0 {
                adam.step(&mut model.params, &grad, cfg.learning_rate);
            }
            model.training_step += 1;
            loss_sum += batch_loss;
            batches += 1;
        }
        let stats = EpochStats { epoch, mean_loss: loss_sum / batches as f64, steps: model.training_step };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_model, ModelConfig};

    fn setup() -> (Checkpoint, Vec<TrainExample>) {
        let cfg = ModelConfig { vocab_size: 9, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_context: 8, dropout: 0.0 };
        let ckpt = init_model(&cfg, 0).unwrap();
        let corpus = vec![
            TrainExample::full(vec![1, 2, 3, 4, 5]),
            TrainExample::full(vec![1, 6, 7, 8]),
            TrainExample { tokens: vec![1, 3, 5, 7], loss_mask: vec![false, false, true, true] },
        ];
        (ckpt, corpus)
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (ckpt, corpus) = setup();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 2, ..Default::default() };
        let (trained, report) = train(&ckpt, &corpus, &cfg).unwrap();
        assert!(trained.params().iter().zip(ckpt.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(trained.training_step, 6);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (ckpt, corpus) = setup();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 30, batch_size: 2, ..Default::default() };
        let (a, ra) = train(&ckpt, &corpus, &cfg).unwrap();
        let (b, rb) = train(&ckpt, &corpus, &cfg).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ra, rb);
        assert!(ra.final_loss().unwrap() < ra.first_loss().unwrap());
    }

    #[test]
    fn zero_epochs_return_the_input() {
        let (ckpt, corpus) = setup();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, report) = train(&ckpt, &corpus, &cfg).unwrap();
        assert_eq!(out, ckpt);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn divergence_reports_step() {
        let (mut ckpt, corpus) = setup();
        ckpt.tensor_mut("lm_head.weight").unwrap()[0] = f64::NAN;
        let err = train(&ckpt, &corpus, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, LmError::Divergence { step: 0 }));
    }

    #[test]
    fn rejects_bad_config() {
        let (ckpt, corpus) = setup();
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(train(&ckpt, &corpus, &cfg), Err(LmError::TrainConfig(_))));
        let cfg = TrainConfig { learning_rate: -1.0, ..Default::default() };
        assert!(matches!(train(&ckpt, &corpus, &cfg), Err(LmError::TrainConfig(_))));
    }
}
