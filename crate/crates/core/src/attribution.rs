//! Gradient-based feature attribution for scalar functions of an image.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::distributions::{graph, one_hot};
use crate::error::{shape_err, Error, Result};
use crate::models::SvaeModel;
use crate::tensor::Tensor;
use crate::Tape;

/// Points evaluated per batched gradient pass.
const CHUNK: usize = 256;

/// A differentiable scalar function on `P`-dimensional inputs.
pub trait ScalarField {
    fn dim(&self) -> usize;

    /// Values and gradients at each row of the `[n, P]` matrix `points`.
    fn eval(&self, points: &Tensor) -> Result<(Vec<f64>, Tensor)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(&Tensor::matrix(1, x.len(), x.to_vec())?)?.0[0])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(&Tensor::matrix(1, x.len(), x.to_vec())?)?.1.into_data())
    }
}

/// What a model-based attribution explains.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributionTarget {
    /// `log p(y = class | z₁)` at the posterior mean of `z₁`.
    Classifier { class: usize },
    /// `KL(q(z_k | reference) ‖ q(z_k | x̃))` as a function of `x̃`, where
    /// block 1 holds the classifier dimensions and block 2 the nuisance ones.
    Divergence { k: usize, reference: Vec<f64> },
}

impl AttributionTarget {
    pub fn spec(&self) -> TargetSpec {
        match self {
            AttributionTarget::Classifier { class } => TargetSpec::Classifier(*class),
            AttributionTarget::Divergence { k, .. } => TargetSpec::Divergence(*k),
        }
    }
}

/// An [`AttributionTarget`] bound to a model.
pub struct ModelTarget<'m> {
    model: &'m SvaeModel,
    target: AttributionTarget,
}

impl<'m> ModelTarget<'m> {
    pub fn new(model: &'m SvaeModel, target: AttributionTarget) -> Result<Self> {
        match &target {
            AttributionTarget::Classifier { class } => {
                if *class >= model.num_classes() {
                    return Err(Error::Label {
                        label: *class,
                        num_classes: model.num_classes(),
                    });
                }
            }
            AttributionTarget::Divergence { k, reference } => {
                model.config().split.block(*k)?;
                if reference.len() != model.input_dim() {
                    return Err(shape_err(
                        "divergence target",
                        format!("reference of length {}, expected {}", reference.len(), model.input_dim()),
                    ));
                }
            }
        }
        Ok(ModelTarget { model, target })
    }

    pub fn target(&self) -> &AttributionTarget {
        &self.target
    }
}

/// `f(x̃) = KL(q(z_k|x_ref) ‖ q(z_k|x̃))`.
pub fn divergence_target<'m>(m: &'m SvaeModel, x_ref: &[f64], k: usize) -> Result<ModelTarget<'m>> {
    ModelTarget::new(
        m,
        AttributionTarget::Divergence {
            k,
            reference: x_ref.to_vec(),
        },
    )
}

pub fn classifier_target(m: &SvaeModel, class: usize) -> Result<ModelTarget<'_>> {
    ModelTarget::new(m, AttributionTarget::Classifier { class })
}

impl ScalarField for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn eval(&self, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (n, width) = points.dims2()?;
        if width != self.dim() {
            return Err(shape_err("attribution target", format!("points of width {width}, expected {}", self.dim())));
        }
        let m = self.model;
        let mut tape = Tape::new();
        let bound = tape.bind(m.params());
        let x = tape.variable(points.clone());
        let q = m.encode_x_graph(&mut tape, &bound, x)?;
        let per_row = match &self.target {
            AttributionTarget::Classifier { class } => {
                let z1 = tape.slice_cols(q.mean, 0, m.d1())?;
                let logits = m.classify_latent_graph(&mut tape, &bound, z1)?;
                let y = tape.constant(one_hot(&vec![*class; n], m.num_classes())?);
                graph::categorical_log_prob(&mut tape, logits, y)?
            }
            AttributionTarget::Divergence { k, reference } => {
                let range = m.config().split.block(*k)?;
                // the reference goes through an identically shaped pass so that
                // d(x_ref, x_ref) cancels to exactly zero
                let reference = Tensor::matrix(n, width, reference.repeat(n))?;
                let mut ref_tape = Tape::new();
                let ref_bound = ref_tape.bind(m.params());
                let ref_x = ref_tape.constant(reference);
                let q_ref = m.encode_x_graph(&mut ref_tape, &ref_bound, ref_x)?;
                let q_ref = q_ref.block(&mut ref_tape, range.start, range.end)?;
                let ref_vars = graph::GaussianVars {
                    mean: tape.constant(ref_tape.value(q_ref.mean).clone()),
                    log_std: tape.constant(ref_tape.value(q_ref.log_std).clone()),
                };
                let q_block = q.block(&mut tape, range.start, range.end)?;
                graph::kl(&mut tape, ref_vars, q_block)?
            }
        };
        let values = tape.value(per_row).data().to_vec();
        let total = tape.sum(per_row);
        let grads = tape.backward(total)?.wrt(&tape, x);
        Ok((values, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Saliency,
    InputXGradient,
    IntegratedGradients,
    GradientShap,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Saliency,
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GradientShap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::InputXGradient => "ixg",
            Method::IntegratedGradients => "ig",
            Method::GradientShap => "gradshap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution method {s:?} (expected saliency, ixg, ig or gradshap)")))
    }
}

/// Target selector without the reference image: `classifier:<c>` or
/// `divergence:k=<1|2>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSpec {
    Classifier(usize),
    Divergence(usize),
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Classifier(c) => write!(f, "classifier:{c}"),
            TargetSpec::Divergence(k) => write!(f, "divergence:k={k}"),
        }
    }
}

impl FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed target {s:?} (expected classifier:<c> or divergence:k=<1|2>)"));
        if let Some(c) = s.strip_prefix("classifier:") {
            return c.parse().map(TargetSpec::Classifier).map_err(|_| bad());
        }
        if let Some(k) = s.strip_prefix("divergence:k=") {
            return match k {
                "1" => Ok(TargetSpec::Divergence(1)),
                "2" => Ok(TargetSpec::Divergence(2)),
                _ => Err(bad()),
            };
        }
        Err(bad())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Vec<f64>,
    pub method: Method,
}

fn check_point(f: &dyn ScalarField, x: &[f64], what: &'static str) -> Result<()> {
    if x.len() != f.dim() {
        return Err(shape_err(what, format!("input of length {}, expected {}", x.len(), f.dim())));
    }
    Ok(())
}

/// Gradients at many points, evaluated in chunks.
fn gradients(f: &dyn ScalarField, points: Vec<f64>) -> Result<Tensor> {
    let p = f.dim();
    let n = points.len() / p;
    let mut out = Vec::with_capacity(points.len());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk = Tensor::matrix(end - start, p, points[start * p..end * p].to_vec())?;
        out.extend(f.eval(&chunk)?.1.into_data());
    }
    Tensor::matrix(n, p, out)
}

/// `|∂f/∂x|`.
pub fn saliency(f: &dyn ScalarField, x: &[f64]) -> Result<AttributionMap> {
    check_point(f, x, "saliency")?;
    Ok(AttributionMap {
        values: f.gradient(x)?.iter().map(|g| g.abs()).collect(),
        method: Method::Saliency,
    })
}

/// `x ⊙ ∂f/∂x`.
pub fn input_x_gradient(f: &dyn ScalarField, x: &[f64]) -> Result<AttributionMap> {
    check_point(f, x, "input_x_gradient")?;
    Ok(AttributionMap {
        values: f.gradient(x)?.iter().zip(x).map(|(g, v)| g * v).collect(),
        method: Method::InputXGradient,
    })
}

/// `(x − b) ⊙ mean_t ∂f/∂x (b + t (x − b))` over midpoint nodes
/// `t = (i + ½) / steps`.
pub fn integrated_gradients(f: &dyn ScalarField, x: &[f64], baseline: &[f64], steps: usize) -> Result<AttributionMap> {
    check_point(f, x, "integrated_gradients")?;
    check_point(f, baseline, "integrated_gradients baseline")?;
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let mut points = Vec::with_capacity(steps * x.len());
    for i in 0..steps {
        let t = (i as f64 + 0.5) / steps as f64;
        points.extend(baseline.iter().zip(x).map(|(b, v)| b + t * (v - b)));
    }
    let g = gradients(f, points)?;
    let mut values = vec![0.0; x.len()];
    for i in 0..steps {
        for (acc, gi) in values.iter_mut().zip(g.row(i)) {
            *acc += gi;
        }
    }
    for ((v, xi), bi) in values.iter_mut().zip(x).zip(baseline) {
        *v = (xi - bi) * *v / steps as f64;
    }
    Ok(AttributionMap {
        values,
        method: Method::IntegratedGradients,
    })
}

/// Mean of `(x − b) ⊙ ∂f/∂x (b + u (x − b) + ε)` over `n_samples` draws of a
/// baseline `b` (uniform over `baselines`), `u ~ U[0, 1]` and
/// `ε ~ N(0, noise_sigma² I)`.
pub fn gradient_shap(
    f: &dyn ScalarField,
    x: &[f64],
    baselines: &[Vec<f64>],
    n_samples: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<AttributionMap> {
    check_point(f, x, "gradient_shap")?;
    if baselines.is_empty() {
        return Err(Error::Empty("gradient shap baselines"));
    }
    for b in baselines {
        check_point(f, b, "gradient_shap baseline")?;
    }
    if n_samples == 0 {
        return Err(Error::Config("gradient shap needs at least one sample".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut picks = Vec::with_capacity(n_samples);
    let mut points = Vec::with_capacity(n_samples * x.len());
    for _ in 0..n_samples {
        let b = &baselines[rng.gen_range(0..baselines.len())];
        let u: f64 = rng.gen();
        for (bi, xi) in b.iter().zip(x) {
            let eps = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            points.push(bi + u * (xi - bi) + eps);
        }
        picks.push(b);
    }
    let g = gradients(f, points)?;
    let mut values = vec![0.0; x.len()];
    for (s, b) in picks.iter().enumerate() {
        for (k, acc) in values.iter_mut().enumerate() {
            *acc += (x[k] - b[k]) * g.row(s)[k];
        }
    }
    values.iter_mut().for_each(|v| *v /= n_samples as f64);
    Ok(AttributionMap {
        values,
        method: Method::GradientShap,
    })
}

/// Settings for [`explain`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOptions {
    pub ig_steps: usize,
    /// Integrated gradients baseline; all zeros when `None`.
    pub ig_baseline: Option<Vec<f64>>,
    /// GradientShap baselines; the all-zeros image when empty.
    pub shap_baselines: Vec<Vec<f64>>,
    pub shap_samples: usize,
    pub shap_noise: f64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            ig_steps: 256,
            ig_baseline: None,
            shap_baselines: Vec::new(),
            shap_samples: 32,
            shap_noise: 0.0,
        }
    }
}

/// Number of training images drawn as default GradientShap baselines.
pub const DEFAULT_SHAP_BASELINES: usize = 16;

/// `n` distinct images of `data` (all of them if it holds fewer), drawn
/// uniformly.
pub fn sample_baselines(data: &Dataset, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    rand::seq::index::sample(rng, data.len(), n.min(data.len()))
        .into_iter()
        .map(|i| data.image(i).to_vec())
        .collect()
}

/// Runs `method` on the model target, the shared entry point of the
/// command line and the HTTP service.
pub fn explain(
    m: &SvaeModel,
    x: &[f64],
    method: Method,
    target: AttributionTarget,
    opts: &ExplainOptions,
    rng: &mut impl Rng,
) -> Result<AttributionMap> {
    crate::distributions::check_unit_interval(x)?;
    let f = ModelTarget::new(m, target)?;
    match method {
        Method::Saliency => saliency(&f, x),
        Method::InputXGradient => input_x_gradient(&f, x),
        Method::IntegratedGradients => {
            let zeros = vec![0.0; x.len()];
            let b = opts.ig_baseline.as_deref().unwrap_or(&zeros);
            integrated_gradients(&f, x, b, opts.ig_steps)
        }
        Method::GradientShap => {
            let zeros = vec![vec![0.0; x.len()]];
            let b = if opts.shap_baselines.is_empty() { &zeros } else { &opts.shap_baselines };
            gradient_shap(&f, x, b, opts.shap_samples, opts.shap_noise, rng)
        }
    }
}

/// [`explain`] with default options and an RNG seeded from `seed`. GradientShap
/// draws its baselines from `pool` when one is given, before sampling.
pub fn explain_with_seed(
    m: &SvaeModel,
    x: &[f64],
    method: Method,
    target: AttributionTarget,
    pool: Option<&Dataset>,
    seed: u64,
) -> Result<AttributionMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opts = ExplainOptions::default();
    if let (Method::GradientShap, Some(pool)) = (method, pool) {
        opts.shap_baselines = sample_baselines(pool, DEFAULT_SHAP_BASELINES, &mut rng);
    }
    explain(m, x, method, target, &opts, &mut rng)
}
