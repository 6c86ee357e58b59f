use rand::Rng;

use super::{check_param_names, widths, ModelConfig};
use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::distributions::graph::{self, GaussianVars};
use crate::distributions::{check_unit_interval, one_hot, Categorical};
use crate::error::{shape_err, Error, Result};
use crate::mlp::{Mlp, MlpSpec, OutputActivation};
use crate::tensor::Tensor;

/// Batch-averaged terms of the M2 objective on labeled data:
/// `U(x, y) + Σ_c q(c|x) U(x, c) + H(q(y|x)) + α log q(y|x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemiVaeTerms {
    pub labeled_u: f64,
    pub marginal_u: f64,
    pub entropy: f64,
    pub classifier_loglik: f64,
    /// `E_q(z|x,y) log p(x|y,z)` for the true label; part of `labeled_u`.
    pub reconstruction: f64,
    pub total: f64,
}

impl SemiVaeTerms {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("labeled_u", self.labeled_u),
            ("marginal_u", self.marginal_u),
            ("entropy", self.entropy),
            ("classifier_loglik", self.classifier_loglik),
            ("reconstruction", self.reconstruction),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SemiVaeElboVars {
    pub labeled_u: Var,
    pub marginal_u: Var,
    pub entropy: Var,
    pub classifier_loglik: Var,
    pub reconstruction: Var,
    pub total: Var,
}

impl SemiVaeElboVars {
    pub fn terms(&self, tape: &Tape<'_>) -> SemiVaeTerms {
        let v = |var: Var| tape.value(var).data()[0];
        SemiVaeTerms {
            labeled_u: v(self.labeled_u),
            marginal_u: v(self.marginal_u),
            entropy: v(self.entropy),
            classifier_loglik: v(self.classifier_loglik),
            reconstruction: v(self.reconstruction),
            total: v(self.total),
        }
    }

    pub fn named(&self) -> [(&'static str, Var); 6] {
        [
            ("labeled_u", self.labeled_u),
            ("marginal_u", self.marginal_u),
            ("entropy", self.entropy),
            ("classifier_loglik", self.classifier_loglik),
            ("reconstruction", self.reconstruction),
            ("total", self.total),
        ]
    }
}

/// M2 model: encoder `q(z|x,y)`, decoder `p(x|y,z)`, classifier `q(y|x)`.
///
/// The classifier uses the encoder's hidden widths so both model families
/// compare under the same capacity.
#[derive(Clone, Debug)]
pub struct SemiVaeModel {
    config: ModelConfig,
    params: ParamSet,
    enc: Mlp,
    dec: Mlp,
    cls: Mlp,
}

impl SemiVaeModel {
    fn specs(config: &ModelConfig) -> Result<[(&'static str, MlpSpec); 3]> {
        config.validate()?;
        let a = &config.architecture;
        let (p, c, d) = (config.input_dim, config.num_classes, config.latent_dim());
        let act = a.hidden_activation;
        Ok([
            (
                "enc",
                MlpSpec::new(widths(p + c, &a.encoder_hidden, 2 * d), act, OutputActivation::Identity)?,
            ),
            (
                "dec",
                MlpSpec::new(widths(d + c, &a.decoder_hidden, p), act, OutputActivation::Identity)?,
            ),
            (
                "cls",
                MlpSpec::new(widths(p, &a.encoder_hidden, c), act, OutputActivation::SoftmaxLogits)?,
            ),
        ])
    }

    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [e, d, c] = Self::specs(&config)?;
        let mut params = ParamSet::new();
        let enc = Mlp::init(e.1, e.0, &mut params, rng)?;
        let dec = Mlp::init(d.1, d.0, &mut params, rng)?;
        let cls = Mlp::init(c.1, c.0, &mut params, rng)?;
        Ok(SemiVaeModel {
            config,
            params,
            enc,
            dec,
            cls,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let [e, d, c] = Self::specs(&config)?;
        let enc = Mlp::attach(e.1, e.0, &params)?;
        let dec = Mlp::attach(d.1, d.0, &params)?;
        let cls = Mlp::attach(c.1, c.0, &params)?;
        let expected = [&enc, &dec, &cls].iter().map(|m| m.param_ids().count()).sum();
        check_param_names(&params, expected)?;
        Ok(SemiVaeModel {
            config,
            params,
            enc,
            dec,
            cls,
        })
    }

    pub fn zero_output_layers(&mut self) {
        for m in [&self.enc, &self.dec, &self.cls] {
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

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn classify_graph(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: Var) -> Result<Var> {
        self.cls.forward(tape, bound, x)
    }

    /// Batch objective. `noise` is `[batch · C, latent_dim]`; row `i·C + c`
    /// drives the sample for image `i` under label `c`. The true-label
    /// term reuses the sample drawn for `c = yᵢ`.
    pub fn elbo_graph(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        x: &Tensor,
        labels: &[usize],
        alpha: f64,
        noise: Tensor,
    ) -> Result<SemiVaeElboVars> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let (batch, width) = x.dims2()?;
        if width != self.input_dim() || labels.len() != batch {
            return Err(shape_err(
                "semivae_elbo",
                format!("{batch}x{width} images with {} labels", labels.len()),
            ));
        }
        check_unit_interval(x.data())?;
        let c = self.num_classes();
        let d = self.latent_dim();
        if noise.shape() != [batch * c, d] {
            return Err(shape_err(
                "semivae_elbo",
                format!("noise shape {:?}, expected [{}, {d}]", noise.shape(), batch * c),
            ));
        }

        let xv = tape.constant(x.clone());
        let yv = tape.constant(one_hot(labels, c)?);

        let logits = self.classify_graph(tape, bound, xv)?;
        let log_q = graph::log_softmax(tape, logits)?;
        let q = tape.exp(log_q);
        let qlq = tape.mul(q, log_q)?;
        let neg_h = tape.sum_rows(qlq)?;
        let entropy = tape.neg(neg_h);
        let picked = tape.mul(yv, log_q)?;
        let cls_ll = tape.sum_rows(picked)?;

        // every image under every label, sample-major
        let mut x_rep = Vec::with_capacity(batch * c * width);
        for i in 0..batch {
            for _ in 0..c {
                x_rep.extend_from_slice(x.row(i));
            }
        }
        let x_rep = tape.constant(Tensor::matrix(batch * c, width, x_rep)?);
        let all_labels: Vec<usize> = (0..batch).flat_map(|_| 0..c).collect();
        let y_rep = tape.constant(one_hot(&all_labels, c)?);

        let xy = tape.concat_cols(&[x_rep, y_rep])?;
        let enc_out = self.enc.forward(tape, bound, xy)?;
        let qz = GaussianVars::from_encoder_output(tape, enc_out)?;
        let z = graph::reparam(tape, qz, noise)?;
        let zy = tape.concat_cols(&[z, y_rep])?;
        let pix = self.dec.forward(tape, bound, zy)?;
        let rec = graph::bernoulli_log_likelihood(tape, pix, x_rep)?;
        let kl = graph::kl_standard_normal(tape, qz)?;
        let u = tape.sub(rec, kl)?;
        let u = tape.reshape(u, &[batch, c])?;
        let rec = tape.reshape(rec, &[batch, c])?;

        let u_lab = tape.mul(yv, u)?;
        let u_lab = tape.sum_rows(u_lab)?;
        let rec_lab = tape.mul(yv, rec)?;
        let rec_lab = tape.sum_rows(rec_lab)?;
        let marg = tape.mul(q, u)?;
        let marg = tape.sum_rows(marg)?;

        let labeled_u = tape.mean(u_lab);
        let marginal_u = tape.mean(marg);
        let entropy = tape.mean(entropy);
        let classifier_loglik = tape.mean(cls_ll);
        let reconstruction = tape.mean(rec_lab);

        let total = tape.add(labeled_u, marginal_u)?;
        let total = tape.add(total, entropy)?;
        let weighted = tape.scale(classifier_loglik, alpha);
        let total = tape.add(total, weighted)?;
        Ok(SemiVaeElboVars {
            labeled_u,
            marginal_u,
            entropy,
            classifier_loglik,
            reconstruction,
            total,
        })
    }

    pub fn semivae_elbo(&self, x: &Tensor, labels: &[usize], alpha: f64, noise: &Tensor) -> Result<SemiVaeTerms> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let vars = self.elbo_graph(&mut tape, &bound, x, labels, alpha, noise.clone())?;
        if let Some(op) = tape.non_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(vars.terms(&tape))
    }

    /// Class logits of `q(y|x)` for each row of a `[batch, P]` matrix.
    pub fn classify_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, width) = x.dims2()?;
        if width != self.input_dim() {
            return Err(shape_err("semivae_classify", format!("images of width {width}, expected {}", self.input_dim())));
        }
        check_unit_interval(x.data())?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let xv = tape.constant(x.clone());
        let out = self.classify_graph(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn semivae_classify(&self, x: &[f64]) -> Result<Categorical> {
        let m = Tensor::matrix(1, x.len(), x.to_vec())?;
        Categorical::new(self.classify_batch(&m)?.into_data())
    }
}
