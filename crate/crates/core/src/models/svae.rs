use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_param_names, widths, ModelConfig};
use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::distributions::graph::{self, GaussianVars};
use crate::distributions::{check_unit_interval, one_hot, Categorical, DiagonalGaussian};
use crate::error::{shape_err, Error, Result};
use crate::mlp::{Mlp, MlpSpec, OutputActivation};
use crate::tensor::Tensor;

/// Number of images pushed through the Monte Carlo classifier at once.
const CLASSIFY_CHUNK: usize = 256;

/// The `β` and `α` weights of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboWeights {
    pub beta: f64,
    pub alpha: f64,
}

impl ElboWeights {
    pub fn new(beta: f64, alpha: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {beta}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(ElboWeights { beta, alpha })
    }
}

/// Batch-averaged terms of the supervised objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// `E_q(z|x,y) log p(x|z)`
    pub reconstruction: f64,
    /// `KL(q(z|x,y) ‖ p(z))`
    pub regularization_kl: f64,
    /// `KL(q(z|x,y) ‖ q(z|x))`
    pub sufficiency_kl: f64,
    /// `E_q(z|x,y) log p(y|z₁)`
    pub classifier_loglik: f64,
    pub total: f64,
}

impl ElboTerms {
    /// `β·R − β·KL_reg − (1−β)·KL_suff + α·C`.
    ///
    /// Accepts the closed interval `β ∈ [0, 1]` so the two limiting
    /// objectives can be inspected.
    pub fn weighted_total(
        reconstruction: f64,
        regularization_kl: f64,
        sufficiency_kl: f64,
        classifier_loglik: f64,
        beta: f64,
        alpha: f64,
    ) -> f64 {
        beta * reconstruction - beta * regularization_kl - (1.0 - beta) * sufficiency_kl + alpha * classifier_loglik
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("reconstruction", self.reconstruction),
            ("regularization_kl", self.regularization_kl),
            ("sufficiency_kl", self.sufficiency_kl),
            ("classifier_loglik", self.classifier_loglik),
            ("total", self.total),
        ]
    }
}

/// Scalar nodes of the objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SvaeElboVars {
    pub reconstruction: Var,
    pub regularization_kl: Var,
    pub sufficiency_kl: Var,
    pub classifier_loglik: Var,
    pub total: Var,
}

impl SvaeElboVars {
    pub fn terms(&self, tape: &Tape<'_>) -> ElboTerms {
        let v = |var: Var| tape.value(var).data()[0];
        ElboTerms {
            reconstruction: v(self.reconstruction),
            regularization_kl: v(self.regularization_kl),
            sufficiency_kl: v(self.sufficiency_kl),
            classifier_loglik: v(self.classifier_loglik),
            total: v(self.total),
        }
    }

    pub fn named(&self) -> [(&'static str, Var); 5] {
        [
            ("reconstruction", self.reconstruction),
            ("regularization_kl", self.regularization_kl),
            ("sufficiency_kl", self.sufficiency_kl),
            ("classifier_loglik", self.classifier_loglik),
            ("total", self.total),
        ]
    }
}

/// Supervised VAE with separate encoders `q(z|x)` and `q(z|x,y)`, a decoder
/// `p(x|z)` over the full latent code and a classifier `p(y|z₁)` that only
/// sees the first `d1` latent coordinates.
#[derive(Clone, Debug)]
pub struct SvaeModel {
    config: ModelConfig,
    params: ParamSet,
    enc_x: Mlp,
    enc_xy: Mlp,
    dec: Mlp,
    cls: Mlp,
}

impl SvaeModel {
    fn specs(config: &ModelConfig) -> Result<[(&'static str, MlpSpec); 4]> {
        config.validate()?;
        let a = &config.architecture;
        let (p, c, d) = (config.input_dim, config.num_classes, config.latent_dim());
        let act = a.hidden_activation;
        Ok([
            (
                "enc_x",
                MlpSpec::new(widths(p, &a.encoder_hidden, 2 * d), act, OutputActivation::Identity)?,
            ),
            (
                "enc_xy",
                MlpSpec::new(widths(p + c, &a.encoder_hidden, 2 * d), act, OutputActivation::Identity)?,
            ),
            (
                "dec",
                MlpSpec::new(widths(d, &a.decoder_hidden, p), act, OutputActivation::Identity)?,
            ),
            (
                "cls",
                MlpSpec::new(
                    widths(config.split.d1, &a.classifier_hidden, c),
                    act,
                    OutputActivation::SoftmaxLogits,
                )?,
            ),
        ])
    }

    /// Randomly initialized model.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [ex, exy, de, cl] = Self::specs(&config)?;
        let mut params = ParamSet::new();
        let enc_x = Mlp::init(ex.1, ex.0, &mut params, rng)?;
        let enc_xy = Mlp::init(exy.1, exy.0, &mut params, rng)?;
        let dec = Mlp::init(de.1, de.0, &mut params, rng)?;
        let cls = Mlp::init(cl.1, cl.0, &mut params, rng)?;
        Ok(SvaeModel {
            config,
            params,
            enc_x,
            enc_xy,
            dec,
            cls,
        })
    }

    /// Rebuilds a model around existing weights, checking that every
    /// expected tensor is present with the right shape and nothing else is.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let [ex, exy, de, cl] = Self::specs(&config)?;
        let enc_x = Mlp::attach(ex.1, ex.0, &params)?;
        let enc_xy = Mlp::attach(exy.1, exy.0, &params)?;
        let dec = Mlp::attach(de.1, de.0, &params)?;
        let cls = Mlp::attach(cl.1, cl.0, &params)?;
        let expected = [&enc_x, &enc_xy, &dec, &cls].iter().map(|m| m.param_ids().count()).sum();
        check_param_names(&params, expected)?;
        Ok(SvaeModel {
            config,
            params,
            enc_x,
            enc_xy,
            dec,
            cls,
        })
    }

    /// Zeroes the output layer of every network: both posteriors become
    /// `N(0, I)`, the decoder outputs logits 0 and the classifier is uniform.
    pub fn zero_output_layers(&mut self) {
        for m in [&self.enc_x, &self.enc_xy, &self.dec, &self.cls] {
            m.zero_output_layer(&mut self.params);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn d1(&self) -> usize {
        self.config.split.d1
    }

    pub fn d2(&self) -> usize {
        self.config.split.d2
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn decoder(&self) -> &Mlp {
        &self.dec
    }

    pub fn classifier(&self) -> &Mlp {
        &self.cls
    }

    pub fn encoder_x(&self) -> &Mlp {
        &self.enc_x
    }

    pub fn encoder_xy(&self) -> &Mlp {
        &self.enc_xy
    }

    // ---- graph building blocks ------------------------------------------

    pub fn encode_x_graph(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: Var) -> Result<GaussianVars> {
        let out = self.enc_x.forward(tape, bound, x)?;
        GaussianVars::from_encoder_output(tape, out)
    }

    pub fn encode_xy_graph(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        x: Var,
        y_one_hot: Var,
    ) -> Result<GaussianVars> {
        let xy = tape.concat_cols(&[x, y_one_hot])?;
        let out = self.enc_xy.forward(tape, bound, xy)?;
        GaussianVars::from_encoder_output(tape, out)
    }

    pub fn decode_graph(&self, tape: &mut Tape<'_>, bound: &BoundParams, z: Var) -> Result<Var> {
        self.dec.forward(tape, bound, z)
    }

    /// Class logits from the classifier block alone. A full latent code
    /// (or anything not exactly `d1` wide) is rejected.
    pub fn classify_latent_graph(&self, tape: &mut Tape<'_>, bound: &BoundParams, z1: Var) -> Result<Var> {
        let width = tape.shape(z1).get(1).copied().unwrap_or(0);
        if width != self.d1() {
            return Err(Error::LatentSplit(format!(
                "classifier reads exactly {} classifier dimensions, got width {width}",
                self.d1()
            )));
        }
        self.cls.forward(tape, bound, z1)
    }

    /// Batch objective. `noise` is `[batch, latent_dim]` standard normal
    /// noise for the single reparameterized sample from `q(z|x,y)`.
    pub fn elbo_graph(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        x: &Tensor,
        labels: &[usize],
        weights: ElboWeights,
        noise: Tensor,
    ) -> Result<SvaeElboVars> {
        let batch = self.check_batch(x, labels)?;
        if noise.shape() != [batch, self.latent_dim()] {
            return Err(shape_err(
                "svae_elbo",
                format!("noise shape {:?}, expected [{batch}, {}]", noise.shape(), self.latent_dim()),
            ));
        }
        let xv = tape.constant(x.clone());
        let yv = tape.constant(one_hot(labels, self.num_classes())?);

        let q_x = self.encode_x_graph(tape, bound, xv)?;
        let q_xy = self.encode_xy_graph(tape, bound, xv, yv)?;
        let z = graph::reparam(tape, q_xy, noise)?;

        let logits = self.decode_graph(tape, bound, z)?;
        let rec = graph::bernoulli_log_likelihood(tape, logits, xv)?;
        let kl_reg = graph::kl_standard_normal(tape, q_xy)?;
        let kl_suff = graph::kl(tape, q_xy, q_x)?;
        let z1 = tape.slice_cols(z, 0, self.d1())?;
        let class_logits = self.classify_latent_graph(tape, bound, z1)?;
        let cls_ll = graph::categorical_log_prob(tape, class_logits, yv)?;

        let reconstruction = tape.mean(rec);
        let regularization_kl = tape.mean(kl_reg);
        let sufficiency_kl = tape.mean(kl_suff);
        let classifier_loglik = tape.mean(cls_ll);

        let ElboWeights { beta, alpha } = weights;
        let a = tape.scale(reconstruction, beta);
        let b = tape.scale(regularization_kl, -beta);
        let c = tape.scale(sufficiency_kl, -(1.0 - beta));
        let d = tape.scale(classifier_loglik, alpha);
        let total = tape.add(a, b)?;
        let total = tape.add(total, c)?;
        let total = tape.add(total, d)?;
        Ok(SvaeElboVars {
            reconstruction,
            regularization_kl,
            sufficiency_kl,
            classifier_loglik,
            total,
        })
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<usize> {
        let (batch, width) = x.dims2()?;
        if width != self.input_dim() {
            return Err(shape_err("svae", format!("images of width {width}, model expects {}", self.input_dim())));
        }
        if labels.len() != batch {
            return Err(shape_err("svae", format!("{batch} images but {} labels", labels.len())));
        }
        check_unit_interval(x.data())?;
        Ok(batch)
    }

    // ---- value-level operations -----------------------------------------

    fn image_matrix(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.input_dim() {
            return Err(shape_err("svae", format!("image of length {}, expected {}", x.len(), self.input_dim())));
        }
        check_unit_interval(x)?;
        Tensor::matrix(1, x.len(), x.to_vec())
    }

    /// `q(z|x)` for each row of a `[batch, P]` image matrix.
    pub fn encode_x_batch(&self, x: &Tensor) -> Result<Vec<DiagonalGaussian>> {
        let (_, width) = x.dims2()?;
        if width != self.input_dim() {
            return Err(shape_err("encode_x", format!("images of width {width}, expected {}", self.input_dim())));
        }
        check_unit_interval(x.data())?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let xv = tape.constant(x.clone());
        let q = self.encode_x_graph(&mut tape, &bound, xv)?;
        gaussians_from(&tape, q)
    }

    pub fn encode_x(&self, x: &[f64]) -> Result<DiagonalGaussian> {
        let m = self.image_matrix(x)?;
        Ok(self.encode_x_batch(&m)?.remove(0))
    }

    pub fn encode_xy(&self, x: &[f64], y: usize) -> Result<DiagonalGaussian> {
        let m = self.image_matrix(x)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let xv = tape.constant(m);
        let yv = tape.constant(one_hot(&[y], self.num_classes())?);
        let q = self.encode_xy_graph(&mut tape, &bound, xv, yv)?;
        Ok(gaussians_from(&tape, q)?.remove(0))
    }

    /// Pixel logits for each row of a `[batch, D]` latent matrix.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let (_, width) = z.dims2()?;
        if width != self.latent_dim() {
            return Err(shape_err("decode", format!("latent width {width}, expected {}", self.latent_dim())));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let zv = tape.constant(z.clone());
        let out = self.decode_graph(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let m = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.decode_batch(&m)?.into_data())
    }

    /// Class logits for each row of a `[batch, d1]` matrix.
    pub fn classify_latent_batch(&self, z1: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let zv = tape.constant(z1.clone());
        let out = self.classify_latent_graph(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn classify_latent(&self, z1: &[f64]) -> Result<Categorical> {
        if z1.len() != self.d1() {
            return Err(Error::LatentSplit(format!(
                "classifier reads exactly {} classifier dimensions, got {}",
                self.d1(),
                z1.len()
            )));
        }
        let m = Tensor::matrix(1, z1.len(), z1.to_vec())?;
        Categorical::new(self.classify_latent_batch(&m)?.into_data())
    }

    /// `p(y|z₁)` for a full latent code `z = (z₁, z₂)`; only the first `d1`
    /// coordinates are read.
    pub fn classify_code(&self, z: &[f64]) -> Result<Categorical> {
        if z.len() != self.latent_dim() {
            return Err(shape_err("classify_code", format!("latent of length {}, expected {}", z.len(), self.latent_dim())));
        }
        self.classify_latent(&z[..self.d1()])
    }

    /// Batch-averaged objective terms for fixed `noise`.
    pub fn svae_elbo(
        &self,
        x: &Tensor,
        labels: &[usize],
        beta: f64,
        alpha: f64,
        noise: &Tensor,
    ) -> Result<ElboTerms> {
        let weights = ElboWeights::new(beta, alpha)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let vars = self.elbo_graph(&mut tape, &bound, x, labels, weights, noise.clone())?;
        if let Some(op) = tape.non_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(vars.terms(&tape))
    }

    /// Monte Carlo estimate of `∫ p(y|z₁) q(z₁|x) dz₁` with `n_samples` draws.
    pub fn classify(&self, x: &[f64], n_samples: usize, rng: &mut impl Rng) -> Result<Categorical> {
        let m = self.image_matrix(x)?;
        let probs = self.classify_batch(&m, n_samples, rng)?;
        Categorical::from_probs(&probs[0])
    }

    /// Averaged class probabilities for each row of a `[batch, P]` matrix.
    pub fn classify_batch(&self, x: &Tensor, n_samples: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        if n_samples == 0 {
            return Err(Error::Config("classify needs at least one sample".into()));
        }
        let (n, width) = x.dims2()?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CLASSIFY_CHUNK) {
            let end = (start + CLASSIFY_CHUNK).min(n);
            let chunk = Tensor::matrix(end - start, width, x.data()[start * width..end * width].to_vec())?;
            let posts = self.encode_x_batch(&chunk)?;
            out.extend(self.classify_posteriors(&posts, n_samples, rng)?);
        }
        Ok(out)
    }

    /// Averaged class probabilities from given posteriors `q(z|x)`.
    pub fn classify_posteriors(
        &self,
        posts: &[DiagonalGaussian],
        n_samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let d1 = self.d1();
        let mut z1 = Vec::with_capacity(posts.len() * n_samples * d1);
        for q in posts {
            for _ in 0..n_samples {
                for j in 0..d1 {
                    let e: f64 = rng.sample(StandardNormal);
                    z1.push(q.mean()[j] + q.std()[j] * e);
                }
            }
        }
        let z1 = Tensor::matrix(posts.len() * n_samples, d1, z1)?;
        let logits = self.classify_latent_batch(&z1)?;
        let c = self.num_classes();
        let mut out = Vec::with_capacity(posts.len());
        for i in 0..posts.len() {
            let mut acc = vec![0.0; c];
            for s in 0..n_samples {
                let row = logits.row(i * n_samples + s);
                let cat = Categorical::new(row.to_vec())?;
                for (a, p) in acc.iter_mut().zip(cat.probs()) {
                    *a += p;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n_samples as f64);
            out.push(acc);
        }
        Ok(out)
    }
}

pub(crate) fn gaussians_from(tape: &Tape<'_>, q: GaussianVars) -> Result<Vec<DiagonalGaussian>> {
    let mean = tape.value(q.mean);
    let log_std = tape.value(q.log_std);
    let d = mean.last_dim();
    (0..mean.shape()[0])
        .map(|i| DiagonalGaussian::from_log_std(mean.row(i).to_vec(), log_std.row(i)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Domain(_) => Error::NonFinite {
                op: format!("encoder output (latent dim {d})"),
            },
            other => other,
        })
}
