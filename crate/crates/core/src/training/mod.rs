//! Adam optimization of either model's objective, evaluation and checkpoints.

mod adam;
mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Var};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::{Architecture, ElboWeights, LatentSplit, Model, ModelConfig, ModelKind};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Rows per forward pass when evaluating objective terms.
const EVAL_CHUNK_ROWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    /// Convex weight between the generative and discriminative objectives (SVAE only).
    pub beta: f64,
    /// Per-sample weight of the classifier log-likelihood.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split: LatentSplit,
    pub architecture: Architecture,
    /// Monte Carlo samples for the SVAE's posterior classifier at evaluation time.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Svae,
            beta: 0.9,
            alpha: 60.0,
            learning_rate: 1e-3,
            batch_size: 100,
            epochs: 20,
            seed: 0,
            split: LatentSplit::default(),
            architecture: Architecture::default(),
            eval_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_kind == ModelKind::Svae {
            ElboWeights::new(self.beta, self.alpha)?;
        } else if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        self.split.validate()?;
        self.architecture.validate()
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            num_classes,
            split: self.split,
            architecture: self.architecture.clone(),
        }
    }
}

/// Named scalar, kept in a fixed order so CSV columns are stable.
pub type Terms = Vec<(String, f64)>;

pub fn term(terms: &Terms, name: &str) -> Option<f64> {
    terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Objective terms averaged over the epoch's training samples.
    pub train_terms: Terms,
    /// Accuracy on the validation set, in percent.
    pub valid_accuracy: Option<f64>,
    pub valid_terms: Terms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Percentage of argmax-correct predictions.
    pub accuracy: f64,
    pub terms: Terms,
    pub predictions: Vec<usize>,
}

impl EvalMetrics {
    pub fn reconstruction(&self) -> f64 {
        term(&self.terms, "reconstruction").unwrap_or(f64::NAN)
    }
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Records the model's objective on `tape`, drawing fresh noise from `rng`.
/// Returns the total and the named terms.
pub fn objective_graph(
    model: &Model,
    config: &TrainConfig,
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    x: &Tensor,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let batch = labels.len();
    let d = model.config().latent_dim();
    match model {
        Model::Svae(m) => {
            let weights = ElboWeights::new(config.beta, config.alpha)?;
            let noise = standard_normal(rng, batch, d)?;
            let vars = m.elbo_graph(tape, bound, x, labels, weights, noise)?;
            Ok((vars.total, vars.named().to_vec()))
        }
        Model::Semivae(m) => {
            let noise = standard_normal(rng, batch * m.num_classes(), d)?;
            let vars = m.elbo_graph(tape, bound, x, labels, config.alpha, noise)?;
            Ok((vars.total, vars.named().to_vec()))
        }
    }
}

fn first_non_finite(tape: &Tape<'_>, named: &[(&'static str, Var)]) -> Option<String> {
    tape.non_finite()?;
    Some(
        named
            .iter()
            .find(|(_, v)| !tape.value(*v).data()[0].is_finite())
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| format!("intermediate value ({})", tape.non_finite().unwrap_or("unknown op"))),
    )
}

/// Trains from a fresh initialization; see [`train_with`].
pub fn train(config: &TrainConfig, train_set: &Dataset, valid_set: Option<&Dataset>) -> Result<Checkpoint> {
    train_with(config, train_set, valid_set, |_| {})
}

/// Runs `config.epochs` passes over `train_set` and calls `on_epoch` after
/// each. Everything random (initialization, batch order, noise, evaluation)
/// derives from `config.seed`.
pub fn train_with(
    config: &TrainConfig,
    train_set: &Dataset,
    valid_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Checkpoint> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(v) = valid_set {
        if v.input_dim() != train_set.input_dim() || v.num_classes() != train_set.num_classes() {
            return Err(Error::Config("validation set does not match the training set's layout".into()));
        }
    }
    let model_config = config.model_config(train_set.input_dim(), train_set.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model_kind, model_config.clone(), &mut rng)?;
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let n = train_set.len();

    for epoch in 1..=config.epochs {
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        for (step, idx) in batches(n, config.batch_size, config.seed, epoch as u64)?.iter().enumerate() {
            let (x, labels) = train_set.gather(idx)?;
            let grads = {
                let mut tape = Tape::new();
                let bound = tape.bind(model.params());
                let (total, named) = objective_graph(&model, config, &mut tape, &bound, &x, &labels, &mut rng)?;
                if let Some(term) = first_non_finite(&tape, &named) {
                    return Err(Error::NonFiniteLoss { term, epoch, step });
                }
                if sums.is_empty() {
                    sums = named.iter().map(|&(name, _)| (name, 0.0)).collect();
                }
                for (s, (_, v)) in sums.iter_mut().zip(&named) {
                    s.1 += tape.value(*v).data()[0] * idx.len() as f64;
                }
                let loss = tape.neg(total);
                let grads = tape.backward(loss).map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFiniteLoss {
                        term: format!("gradient ({op})"),
                        epoch,
                        step,
                    },
                    other => other,
                })?;
                grads.for_params(&bound, model.params())
            };
            adam_step(model.params_mut(), &grads, &mut adam, config.learning_rate)?;
        }
        let train_terms = sums.into_iter().map(|(k, s)| (k.to_string(), s / n as f64)).collect();
        let (valid_accuracy, valid_terms) = match valid_set {
            Some(v) if !v.is_empty() => {
                let m = evaluate(&model, config, v, config.eval_samples, eval_seed(config.seed, epoch))?;
                (Some(m.accuracy), m.terms)
            }
            _ => (None, Vec::new()),
        };
        let metrics = EpochMetrics {
            epoch,
            train_terms,
            valid_accuracy,
            valid_terms,
        };
        log::info!(
            "epoch {epoch}: total {:.4}, valid accuracy {}",
            term(&metrics.train_terms, "total").unwrap_or(f64::NAN),
            metrics.valid_accuracy.map_or("n/a".to_string(), |a| format!("{a:.2}%"))
        );
        on_epoch(&metrics);
        history.push(metrics);
    }

    Ok(Checkpoint {
        config: config.clone(),
        model: model_config,
        image_shape: train_set.image_shape(),
        params: match model {
            Model::Svae(m) => m.into_params(),
            Model::Semivae(m) => m.into_params(),
        },
        epoch: config.epochs,
        metrics_history: history,
    })
}

fn eval_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1))
}

/// Accuracy and mean objective terms of `model` on `data`.
///
/// Classification and the objective's noise use independent streams
/// derived from `seed`.
pub fn evaluate(
    model: &Model,
    config: &TrainConfig,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let c = model.config().num_classes;
    if let Some(&label) = data.labels().iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, num_classes: c });
    }
    let mut cls_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let probs = model.predict_probs(data.images(), n_samples, &mut cls_rng)?;
    let predictions: Vec<usize> = probs.iter().map(|p| crate::distributions::argmax(p)).collect();
    let correct = predictions.iter().zip(data.labels()).filter(|(p, y)| p == y).count();

    let rows_per_sample = match model {
        Model::Svae(_) => 1,
        Model::Semivae(_) => c,
    };
    let chunk = (EVAL_CHUNK_ROWS / rows_per_sample).max(1);
    let n = data.len();
    let mut sums: Vec<(&'static str, f64)> = Vec::new();
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (x, labels) = data.gather(&idx)?;
        let mut tape = Tape::new();
        let bound = tape.bind(model.params());
        let (_, named) = objective_graph(model, config, &mut tape, &bound, &x, &labels, &mut noise_rng)?;
        if let Some(term) = first_non_finite(&tape, &named) {
            return Err(Error::NonFinite { op: term });
        }
        if sums.is_empty() {
            sums = named.iter().map(|&(name, _)| (name, 0.0)).collect();
        }
        for (s, (_, v)) in sums.iter_mut().zip(&named) {
            s.1 += tape.value(*v).data()[0] * idx.len() as f64;
        }
    }
    Ok(EvalMetrics {
        samples: n,
        accuracy: 100.0 * correct as f64 / n as f64,
        terms: sums.into_iter().map(|(k, s)| (k.to_string(), s / n as f64)).collect(),
        predictions,
    })
}

/// One row per epoch: `epoch`, the training terms, validation accuracy and
/// validation terms. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let Some(first) = history.first() else {
        return "epoch\n".to_string();
    };
    let mut header = vec!["epoch".to_string()];
    header.extend(first.train_terms.iter().map(|(k, _)| format!("train_{k}")));
    header.push("valid_accuracy".into());
    header.extend(first.valid_terms.iter().map(|(k, _)| format!("valid_{k}")));
    let mut out = header.join(",");
    out.push('\n');
    for m in history {
        let mut row = vec![m.epoch.to_string()];
        row.extend(m.train_terms.iter().map(|(_, v)| v.to_string()));
        row.push(m.valid_accuracy.map(|a| a.to_string()).unwrap_or_default());
        row.extend(m.valid_terms.iter().map(|(_, v)| v.to_string()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
