//! The supervised VAE and the semi-supervised M2 baseline.

mod semivae;
mod svae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Activation;

pub use semivae::{SemiVaeElboVars, SemiVaeModel, SemiVaeTerms};
pub use svae::{ElboTerms, ElboWeights, SvaeElboVars, SvaeModel};

/// Partition of the latent code into classifier dimensions `z₁` (first
/// `d1` coordinates) and nuisance dimensions `z₂` (the remaining `d2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub d1: usize,
    pub d2: usize,
}

impl LatentSplit {
    pub fn new(d1: usize, d2: usize) -> Result<Self> {
        let s = LatentSplit { d1, d2 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config(format!(
                "both latent blocks need at least one dimension, got d1={} d2={}",
                self.d1, self.d2
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.d1 + self.d2
    }

    /// Column range of block `k` (1 = classifier, 2 = nuisance).
    pub fn block(&self, k: usize) -> Result<std::ops::Range<usize>> {
        match k {
            1 => Ok(0..self.d1),
            2 => Ok(self.d1..self.total()),
            _ => Err(Error::LatentSplit(format!("latent block must be 1 or 2, got {k}"))),
        }
    }
}

impl Default for LatentSplit {
    fn default() -> Self {
        LatentSplit { d1: 10, d2: 5 }
    }
}

/// Hidden layer widths shared by both model families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
            classifier_hidden: vec![128],
            hidden_activation: Activation::Silu,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [
            ("encoder", &self.encoder_hidden),
            ("decoder", &self.decoder_hidden),
            ("classifier", &self.classifier_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::Config(format!("zero hidden width in {name} {widths:?}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub split: LatentSplit,
    pub architecture: Architecture,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {}", self.num_classes)));
        }
        self.split.validate()?;
        self.architecture.validate()
    }

    pub fn latent_dim(&self) -> usize {
        self.split.total()
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Checks that `params` holds exactly the names in `expected`.
fn check_param_names(params: &crate::autodiff::ParamSet, expected: usize) -> Result<()> {
    if params.len() != expected {
        return Err(Error::CheckpointFormat(format!(
            "expected {expected} parameter tensors, found {}",
            params.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Svae,
    Semivae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Svae => "svae",
            ModelKind::Semivae => "semivae",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svae" => Ok(ModelKind::Svae),
            "semivae" => Ok(ModelKind::Semivae),
            other => Err(Error::Config(format!("unknown model kind {other:?} (expected svae or semivae)"))),
        }
    }
}

/// Either model family behind one interface.
#[derive(Clone, Debug)]
pub enum Model {
    Svae(SvaeModel),
    Semivae(SemiVaeModel),
}

impl Model {
    pub fn new(kind: ModelKind, config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(match kind {
            ModelKind::Svae => Model::Svae(SvaeModel::new(config, rng)?),
            ModelKind::Semivae => Model::Semivae(SemiVaeModel::new(config, rng)?),
        })
    }

    pub fn from_params(kind: ModelKind, config: ModelConfig, params: crate::autodiff::ParamSet) -> Result<Self> {
        Ok(match kind {
            ModelKind::Svae => Model::Svae(SvaeModel::from_params(config, params)?),
            ModelKind::Semivae => Model::Semivae(SemiVaeModel::from_params(config, params)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Svae(_) => ModelKind::Svae,
            Model::Semivae(_) => ModelKind::Semivae,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Svae(m) => m.config(),
            Model::Semivae(m) => m.config(),
        }
    }

    pub fn params(&self) -> &crate::autodiff::ParamSet {
        match self {
            Model::Svae(m) => m.params(),
            Model::Semivae(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut crate::autodiff::ParamSet {
        match self {
            Model::Svae(m) => m.params_mut(),
            Model::Semivae(m) => m.params_mut(),
        }
    }

    pub fn zero_output_layers(&mut self) {
        match self {
            Model::Svae(m) => m.zero_output_layers(),
            Model::Semivae(m) => m.zero_output_layers(),
        }
    }

    pub fn as_svae(&self) -> Option<&SvaeModel> {
        match self {
            Model::Svae(m) => Some(m),
            Model::Semivae(_) => None,
        }
    }

    /// Class probabilities for each row of `x`: the Monte Carlo posterior
    /// classifier for the SVAE (`n_samples` draws), `q(y|x)` for the M2 model.
    pub fn predict_probs(
        &self,
        x: &crate::tensor::Tensor,
        n_samples: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Model::Svae(m) => m.classify_batch(x, n_samples, rng),
            Model::Semivae(m) => {
                let logits = m.classify_batch(x)?;
                (0..logits.shape()[0])
                    .map(|i| Ok(crate::distributions::Categorical::new(logits.row(i).to_vec())?.probs()))
                    .collect()
            }
        }
    }
}
