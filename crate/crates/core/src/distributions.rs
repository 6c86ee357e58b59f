//! Diagonal Gaussians, Bernoulli pixels and categorical labels.
//!
//! Plain-value functions live at the top level; [`graph`] holds the same
//! quantities recorded on a tape so they can be differentiated.

use crate::autodiff::{logsumexp, sigmoid, softplus};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(shape_err(
                "DiagonalGaussian",
                format!("mean has {} entries, std {}", mean.len(), std.len()),
            ));
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("standard deviation must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                op: "DiagonalGaussian mean".into(),
            });
        }
        Ok(DiagonalGaussian { mean, std })
    }

    /// `N(0, I)` of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_log_std(mean: Vec<f64>, log_std: &[f64]) -> Result<Self> {
        DiagonalGaussian::new(mean, log_std.iter().map(|l| l.exp()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// The marginal over coordinates `start..end`.
    pub fn marginal(&self, start: usize, end: usize) -> Result<DiagonalGaussian> {
        if start >= end || end > self.dim() {
            return Err(shape_err("marginal", format!("{start}..{end} of dimension {}", self.dim())));
        }
        Ok(DiagonalGaussian {
            mean: self.mean[start..end].to_vec(),
            std: self.std[start..end].to_vec(),
        })
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), v)| {
                let u = (v - m) / s;
                -0.5 * u * u - s.ln() - half_ln_2pi
            })
            .sum()
    }
}

/// `KL(q ‖ p)` between diagonal Gaussians, in nats.
///
/// Evaluated per coordinate as `(ln σp − ln σq) + ½ r + ½ (μq − μp)² / σp² − ½`
/// with `r = exp(2 (ln σq − ln σp))`, which is exactly zero when `q == p`.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(shape_err("kl_diag_gaussians", format!("dimensions {} and {}", q.dim(), p.dim())));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.std[i].ln(), p.std[i].ln());
        let d = lq - lp;
        let dm = q.mean[i] - p.mean[i];
        kl += -d + 0.5 * (2.0 * d).exp_m1() + 0.5 * dm * dm / (p.std[i] * p.std[i]);
    }
    Ok(kl)
}

/// `mean + std ⊙ noise`.
pub fn reparam_sample(q: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(shape_err("reparam_sample", format!("noise of length {} for dimension {}", noise.len(), q.dim())));
    }
    Ok(q.mean.iter().zip(&q.std).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// `Σᵢ xᵢ log σ(lᵢ) + (1 − xᵢ) log(1 − σ(lᵢ))`, via `xᵢ lᵢ − softplus(lᵢ)`.
pub fn bernoulli_log_likelihood(pixel_logits: &Tensor, x: &Tensor) -> Result<f64> {
    if pixel_logits.shape() != x.shape() {
        return Err(shape_err(
            "bernoulli_log_likelihood",
            format!("{:?} vs {:?}", pixel_logits.shape(), x.shape()),
        ));
    }
    check_unit_interval(x.data())?;
    Ok(pixel_logits.data().iter().zip(x.data()).map(|(&l, &v)| v * l - softplus(l)).sum())
}

pub(crate) fn check_unit_interval(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mean pixel intensities `σ(logits)`.
pub fn pixel_means(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| sigmoid(l)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    logits: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Empty("categorical logits"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                op: "categorical logits".into(),
            });
        }
        Ok(Categorical { logits })
    }

    /// From probabilities; zero-probability classes get a large negative logit.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || !(total > 0.0) {
            return Err(Error::Domain(format!("invalid probability vector {probs:?}")));
        }
        Categorical::new(probs.iter().map(|p| (p / total).ln().max(-745.0)).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn log_prob(&self, label: usize) -> Result<f64> {
        categorical_log_prob(self, label)
    }

    pub fn entropy(&self) -> f64 {
        categorical_entropy(self)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// `logits[label] − logsumexp(logits)`.
pub fn categorical_log_prob(c: &Categorical, label: usize) -> Result<f64> {
    if label >= c.num_classes() {
        return Err(Error::Label {
            label,
            num_classes: c.num_classes(),
        });
    }
    Ok(c.logits[label] - logsumexp(&c.logits))
}

/// `−Σ p log p` over `softmax(logits)`.
pub fn categorical_entropy(c: &Categorical) -> f64 {
    let lse = logsumexp(&c.logits);
    let h: f64 = c
        .logits
        .iter()
        .map(|l| {
            let lp = l - lse;
            -lp.exp() * lp
        })
        .sum();
    h.max(0.0)
}

/// Tape-recorded versions operating on `[batch, dim]` matrices.
pub mod graph {
    use crate::autodiff::{Tape, Var};
    use crate::error::{shape_err, Result};
    use crate::tensor::Tensor;

    /// A batch of diagonal Gaussians parameterized by mean and log-std.
    #[derive(Clone, Copy, Debug)]
    pub struct GaussianVars {
        pub mean: Var,
        pub log_std: Var,
    }

    impl GaussianVars {
        /// Splits a `[batch, 2·dim]` encoder output into mean and log-std.
        pub fn from_encoder_output(tape: &mut Tape<'_>, out: Var) -> Result<Self> {
            let width = tape.shape(out)[1];
            if width % 2 != 0 {
                return Err(shape_err("GaussianVars", format!("odd encoder width {width}")));
            }
            let d = width / 2;
            Ok(GaussianVars {
                mean: tape.slice_cols(out, 0, d)?,
                log_std: tape.slice_cols(out, d, width)?,
            })
        }

        /// Columns `start..end` of both parameters.
        pub fn block(&self, tape: &mut Tape<'_>, start: usize, end: usize) -> Result<Self> {
            Ok(GaussianVars {
                mean: tape.slice_cols(self.mean, start, end)?,
                log_std: tape.slice_cols(self.log_std, start, end)?,
            })
        }
    }

    /// Per-row `KL(q ‖ p)`, shape `[batch]`.
    pub fn kl(tape: &mut Tape<'_>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
        // (lp − lq) + ½ exp(2(lq − lp)) + ½ (μq − μp)² exp(−2 lp) − ½
        let d = tape.sub(q.log_std, p.log_std)?;
        let two_d = tape.scale(d, 2.0);
        let ratio = tape.exp(two_d);
        let dm = tape.sub(q.mean, p.mean)?;
        let dm2 = tape.mul(dm, dm)?;
        let neg2lp = tape.scale(p.log_std, -2.0);
        let inv_var = tape.exp(neg2lp);
        let quad = tape.mul(dm2, inv_var)?;
        let half = tape.add(ratio, quad)?;
        let half = tape.scale(half, 0.5);
        let neg_d = tape.neg(d);
        let terms = tape.add(half, neg_d)?;
        let terms = tape.shift(terms, -0.5);
        tape.sum_rows(terms)
    }

    /// Per-row `KL(q ‖ N(0, I))`, shape `[batch]`.
    pub fn kl_standard_normal(tape: &mut Tape<'_>, q: GaussianVars) -> Result<Var> {
        // −lq + ½ exp(2 lq) + ½ μ² − ½
        let two_l = tape.scale(q.log_std, 2.0);
        let var = tape.exp(two_l);
        let m2 = tape.mul(q.mean, q.mean)?;
        let half = tape.add(var, m2)?;
        let half = tape.scale(half, 0.5);
        let neg_l = tape.neg(q.log_std);
        let terms = tape.add(half, neg_l)?;
        let terms = tape.shift(terms, -0.5);
        tape.sum_rows(terms)
    }

    /// `mean + exp(log_std) ⊙ noise`; `noise` is a constant.
    pub fn reparam(tape: &mut Tape<'_>, q: GaussianVars, noise: Tensor) -> Result<Var> {
        let eps = tape.constant(noise);
        let std = tape.exp(q.log_std);
        let scaled = tape.mul(std, eps)?;
        tape.add(q.mean, scaled)
    }

    /// Per-row Bernoulli log-likelihood `Σ x l − softplus(l)`, shape `[batch]`.
    pub fn bernoulli_log_likelihood(tape: &mut Tape<'_>, logits: Var, x: Var) -> Result<Var> {
        let xl = tape.mul(x, logits)?;
        let sp = tape.softplus(logits);
        let ll = tape.sub(xl, sp)?;
        tape.sum_rows(ll)
    }

    /// Row-wise `logits − logsumexp(logits)`, shape `[batch, classes]`.
    pub fn log_softmax(tape: &mut Tape<'_>, logits: Var) -> Result<Var> {
        let classes = tape.shape(logits)[1];
        let lse = tape.logsumexp_rows(logits)?;
        let lse = tape.broadcast_cols(lse, classes)?;
        tape.sub(logits, lse)
    }

    /// Per-row `log p(label)`, shape `[batch]`. `one_hot` is `[batch, classes]`.
    pub fn categorical_log_prob(tape: &mut Tape<'_>, logits: Var, one_hot: Var) -> Result<Var> {
        let lse = tape.logsumexp_rows(logits)?;
        let picked = tape.mul(logits, one_hot)?;
        let picked = tape.sum_rows(picked)?;
        tape.sub(picked, lse)
    }

    /// Per-row entropy `−Σ p log p`, shape `[batch]`.
    pub fn categorical_entropy(tape: &mut Tape<'_>, logits: Var) -> Result<Var> {
        let lp = log_softmax(tape, logits)?;
        let p = tape.exp(lp);
        let plp = tape.mul(p, lp)?;
        let s = tape.sum_rows(plp)?;
        Ok(tape.neg(s))
    }
}

/// `[labels.len(), num_classes]` one-hot matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Label { label: y, num_classes });
        }
        data[i * num_classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}
