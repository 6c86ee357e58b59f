//! Nuisance resampling, the σ-sweep invariance test, latent grids and
//! counterfactuals.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::distributions::{argmax, graph, pixel_means, Categorical};
use crate::error::{Error, Result};
use crate::models::SvaeModel;
use crate::tensor::Tensor;
use crate::Tape;

/// Images per batched encode/decode/classify pass.
const CHUNK: usize = 256;

pub const DEFAULT_SIGMAS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSample {
    pub original: Vec<f64>,
    pub transformed: Vec<f64>,
    pub original_pred: usize,
    pub transformed_pred: usize,
    pub sigma: f64,
    pub z2_used: Vec<f64>,
    /// Class probabilities of the transformed image.
    pub transformed_probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvariantOptions {
    /// Monte Carlo samples used by the posterior classifier.
    pub classify_samples: usize,
    /// Redraw `z₂` until the transformed image keeps the original prediction.
    pub keep_class: bool,
    /// Upper bound on draws when `keep_class` is set.
    pub max_attempts: usize,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        InvariantOptions {
            classify_samples: 32,
            keep_class: false,
            max_attempts: 20,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Decoded mean image `σ(decode(z))` for a full latent code.
pub fn render(m: &SvaeModel, z: &[f64]) -> Result<Vec<f64>> {
    Ok(pixel_means(&m.decode(z)?))
}

/// Keeps `z₁` at the mean of `q(z|x)`, draws `z₂ ~ N(0, σ² I)` and decodes.
///
/// With `keep_class` the draw is repeated (up to `max_attempts`) until the
/// prediction is unchanged; the last draw is returned either way.
pub fn generate_invariant(
    m: &SvaeModel,
    x: &[f64],
    sigma: f64,
    opts: &InvariantOptions,
    rng: &mut impl Rng,
) -> Result<InvariantSample> {
    check_sigma(sigma)?;
    let q = m.encode_x(x)?;
    let original_pred = m.classify(x, opts.classify_samples, rng)?.argmax();
    let attempts = if opts.keep_class { opts.max_attempts.max(1) } else { 1 };
    let mut last = None;
    for _ in 0..attempts {
        let z2: Vec<f64> = (0..m.d2()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut z = q.mean()[..m.d1()].to_vec();
        z.extend_from_slice(&z2);
        let transformed = render(m, &z)?;
        let probs = m.classify(&transformed, opts.classify_samples, rng)?.probs();
        let sample = InvariantSample {
            original: x.to_vec(),
            transformed,
            original_pred,
            transformed_pred: argmax(&probs),
            sigma,
            z2_used: z2,
            transformed_probs: probs,
        };
        let kept = sample.transformed_pred == original_pred;
        last = Some(sample);
        if kept {
            break;
        }
    }
    Ok(last.expect("at least one attempt"))
}

/// Image from an explicit `z₂`, with `z₁` at the mean of `q(z|x)`.
pub fn generate_with_z2(m: &SvaeModel, x: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
    if z2.len() != m.d2() {
        return Err(Error::LatentSplit(format!("z2 has length {}, expected {}", z2.len(), m.d2())));
    }
    let q = m.encode_x(x)?;
    let mut z = q.mean()[..m.d1()].to_vec();
    z.extend_from_slice(z2);
    render(m, &z)
}

/// Fraction of unchanged predictions and mean `‖x − x̃‖₂` per σ.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionCurve {
    pub sigma_grid: Vec<f64>,
    pub retention: Vec<f64>,
    pub mean_l2: Vec<f64>,
}

impl RetentionCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,retention,mean_l2\n");
        for i in 0..self.sigma_grid.len() {
            out.push_str(&format!("{},{},{}\n", self.sigma_grid[i], self.retention[i], self.mean_l2[i]));
        }
        out
    }
}

fn image_chunk(data: &Dataset, start: usize, end: usize) -> Result<Tensor> {
    let p = data.input_dim();
    Tensor::matrix(end - start, p, data.images().data()[start * p..end * p].to_vec())
}

/// Runs the σ sweep over every image of `data`, with `n_per_sigma`
/// nuisance draws per image and σ. Predictions use the posterior
/// classifier with `classify_samples` draws.
pub fn invariance_test(
    m: &SvaeModel,
    data: &Dataset,
    sigma_grid: &[f64],
    n_per_sigma: usize,
    classify_samples: usize,
    rng: &mut impl Rng,
) -> Result<RetentionCurve> {
    if data.is_empty() {
        return Err(Error::Empty("invariance test dataset"));
    }
    if sigma_grid.is_empty() {
        return Err(Error::Empty("sigma grid"));
    }
    for &s in sigma_grid {
        check_sigma(s)?;
    }
    if sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("sigma grid must be increasing, got {sigma_grid:?}")));
    }
    if n_per_sigma == 0 {
        return Err(Error::Config("n_per_sigma must be positive".into()));
    }
    let (d1, d2) = (m.d1(), m.d2());
    let n = data.len();

    let mut means = Vec::with_capacity(n);
    let mut original_pred = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let x = image_chunk(data, start, end)?;
        let posts = m.encode_x_batch(&x)?;
        original_pred.extend(m.classify_posteriors(&posts, classify_samples, rng)?.iter().map(|p| argmax(p)));
        means.extend(posts.into_iter().map(|q| q.mean()[..d1].to_vec()));
    }

    let mut retention = Vec::with_capacity(sigma_grid.len());
    let mut mean_l2 = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let (mut kept, mut l2_sum) = (0usize, 0.0);
        for _ in 0..n_per_sigma {
            for start in (0..n).step_by(CHUNK) {
                let end = (start + CHUNK).min(n);
                let mut z = Vec::with_capacity((end - start) * (d1 + d2));
                for mean in &means[start..end] {
                    z.extend_from_slice(mean);
                    z.extend((0..d2).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)));
                }
                let logits = m.decode_batch(&Tensor::matrix(end - start, d1 + d2, z)?)?;
                let images = Tensor::matrix(end - start, data.input_dim(), pixel_means(logits.data()))?;
                let posts = m.encode_x_batch(&images)?;
                let probs = m.classify_posteriors(&posts, classify_samples, rng)?;
                for (k, p) in probs.iter().enumerate() {
                    let i = start + k;
                    if argmax(p) == original_pred[i] {
                        kept += 1;
                    }
                    let d: f64 = images.row(k).iter().zip(data.image(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    l2_sum += d.sqrt();
                }
            }
        }
        let total = (n * n_per_sigma) as f64;
        retention.push(kept as f64 / total);
        mean_l2.push(l2_sum / total);
    }
    Ok(RetentionCurve {
        sigma_grid: sigma_grid.to_vec(),
        retention,
        mean_l2,
    })
}

/// `(2r+1) × (2r+1)` decoded images around the posterior mean of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub radius: usize,
    pub step: f64,
    pub dims: (usize, usize),
    /// Row-major cells: row `a + r` and column `b + r` hold the image with
    /// `z₂[dim_i] += a·step` and `z₂[dim_j] += b·step`.
    pub images: Vec<Vec<f64>>,
    pub codes: Vec<Vec<f64>>,
}

impl LatentGrid {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn cell(&self, a: isize, b: isize) -> &[f64] {
        let r = self.radius as isize;
        &self.images[((a + r) * (2 * r + 1) + (b + r)) as usize]
    }
}

pub fn explore_grid(
    m: &SvaeModel,
    x: &[f64],
    dim_i: usize,
    dim_j: usize,
    step: f64,
    radius: usize,
) -> Result<LatentGrid> {
    let d2 = m.d2();
    if dim_i >= d2 || dim_j >= d2 {
        return Err(Error::LatentSplit(format!(
            "nuisance dimensions ({dim_i}, {dim_j}) outside 0..{d2}"
        )));
    }
    if dim_i == dim_j {
        return Err(Error::Config(format!("grid dimensions must differ, got {dim_i} twice")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let center = m.encode_x(x)?.mean().to_vec();
    let d1 = m.d1();
    let r = radius as isize;
    let mut codes = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            let mut z = center.clone();
            z[d1 + dim_i] += a as f64 * step;
            z[d1 + dim_j] += b as f64 * step;
            codes.push(z);
        }
    }
    let side = 2 * radius + 1;
    let flat: Vec<f64> = codes.concat();
    let logits = m.decode_batch(&Tensor::matrix(side * side, m.latent_dim(), flat)?)?;
    let images = (0..side * side).map(|k| pixel_means(logits.row(k))).collect();
    Ok(LatentGrid {
        radius,
        step,
        dims: (dim_i, dim_j),
        images,
        codes,
    })
}

/// Probability at which counterfactual search stops.
pub const COUNTERFACTUAL_STOP: f64 = 0.9;
/// Probability a counterfactual must reach to count as converged.
pub const COUNTERFACTUAL_CONVERGED: f64 = 0.5;
pub const COUNTERFACTUAL_MAX_ITERS: usize = 500;
pub const COUNTERFACTUAL_STEP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub image: Vec<f64>,
    pub target: usize,
    /// `p(target | z₁)` at the final code.
    pub probability: f64,
    pub probs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub z_start: Vec<f64>,
    pub z: Vec<f64>,
}

/// Gradient ascent on `log p(target | z₁)` over `z₁` from the posterior mean
/// of `x`, with `z₂` frozen. Stops once `p(target) ≥ 0.9` or after
/// `max_iters` steps; the result counts as converged when `p(target) ≥ 0.5`.
pub fn counterfactual(
    m: &SvaeModel,
    x: &[f64],
    target: usize,
    max_iters: usize,
    step_size: f64,
) -> Result<Counterfactual> {
    let c = m.num_classes();
    if target >= c {
        return Err(Error::Label { label: target, num_classes: c });
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {step_size}")));
    }
    let d1 = m.d1();
    let z_start = m.encode_x(x)?.mean().to_vec();
    let mut z1 = z_start[..d1].to_vec();
    let one_hot = crate::distributions::one_hot(&[target], c)?;
    let mut iterations = 0;
    let mut cat: Categorical;
    loop {
        let mut tape = Tape::new();
        let bound = tape.bind(m.params());
        let zv = tape.variable(Tensor::matrix(1, d1, z1.clone())?);
        let logits = m.classify_latent_graph(&mut tape, &bound, zv)?;
        cat = Categorical::new(tape.value(logits).data().to_vec())?;
        if cat.probs()[target] >= COUNTERFACTUAL_STOP || iterations >= max_iters {
            break;
        }
        let yv = tape.constant(one_hot.clone());
        let lp = graph::categorical_log_prob(&mut tape, logits, yv)?;
        let lp = tape.sum(lp);
        let g = tape.backward(lp)?.wrt(&tape, zv);
        for (v, d) in z1.iter_mut().zip(g.data()) {
            *v += step_size * d;
        }
        iterations += 1;
    }
    let mut z = z1;
    z.extend_from_slice(&z_start[d1..]);
    let probs = cat.probs();
    let probability = probs[target];
    Ok(Counterfactual {
        image: render(m, &z)?,
        target,
        probability,
        probs,
        converged: probability >= COUNTERFACTUAL_CONVERGED,
        iterations,
        z_start,
        z,
    })
}
