use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svae_core::mlp::Activation;
use svae_core::models::{Architecture, ElboTerms, LatentSplit, ModelConfig, SemiVaeModel, SvaeModel};
use svae_core::{Error, ParamSet, Tape, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

fn small_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        num_classes: 3,
        split: LatentSplit::new(2, 2).unwrap(),
        architecture: Architecture {
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            classifier_hidden: vec![3],
            hidden_activation: activation,
        },
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform_images(rng: &mut impl Rng, n: usize, p: usize) -> Tensor {
    Tensor::matrix(n, p, (0..n * p).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn randomize(params: &mut ParamSet, rng: &mut impl Rng) {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let id = params.id(&name).unwrap();
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = normal_tensor(rng, &shape, 0.4);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[test]
fn zero_init_svae_closed_form() {
    let cfg = small_config(Activation::Relu);
    let mut m = SvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    m.zero_output_layers();
    let x = vec![0.5; 6];
    for q in [m.encode_x(&x).unwrap(), m.encode_xy(&x, 2).unwrap()] {
        assert!(q.mean().iter().all(|&v| v == 0.0));
        assert!(q.std().iter().all(|&v| v == 1.0));
    }
    assert!(m.decode(&[0.3, -1.0, 2.0, 0.1]).unwrap().iter().all(|&l| l == 0.0));
    let probs = m.classify_latent(&[1.0, -3.0]).unwrap().probs();
    assert!(probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));

    let xb = Tensor::matrix(1, 6, x).unwrap();
    let noise = normal_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 4], 1.0);
    let t = m.svae_elbo(&xb, &[1], 0.5, 1.0, &noise).unwrap();
    assert!((t.reconstruction + 6.0 * LN2).abs() < 1e-12);
    assert_eq!(t.regularization_kl, 0.0);
    assert_eq!(t.sufficiency_kl, 0.0);
    assert!((t.classifier_loglik - (1.0f64 / 3.0).ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 7, 64] {
        let c = m.classify(&vec![0.2; 6], n, &mut rng).unwrap();
        assert!(c.probs().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }
}

#[test]
fn total_reassembles_from_terms() {
    let cfg = small_config(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = SvaeModel::new(cfg, &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    let x = uniform_images(&mut rng, 5, 6);
    let noise = normal_tensor(&mut rng, &[5, 4], 1.0);
    for (beta, alpha) in [(0.9, 50.0), (0.01, 6000.0), (0.5, 1.0)] {
        let t = m.svae_elbo(&x, &[0, 1, 2, 0, 1], beta, alpha, &noise).unwrap();
        let re = ElboTerms::weighted_total(
            t.reconstruction,
            t.regularization_kl,
            t.sufficiency_kl,
            t.classifier_loglik,
            beta,
            alpha,
        );
        assert!((re - t.total).abs() <= 1e-12 * t.total.abs().max(1.0));
        assert!(t.regularization_kl >= 0.0 && t.sufficiency_kl >= 0.0);
    }
}

#[test]
fn weighted_total_limits() {
    // β = 1: generative ELBO plus classifier; β = 0: reconstruction and prior KL vanish
    assert_eq!(ElboTerms::weighted_total(-10.0, 2.0, 3.0, -0.5, 1.0, 4.0), -10.0 - 2.0 - 2.0);
    assert_eq!(ElboTerms::weighted_total(-10.0, 2.0, 3.0, -0.5, 0.0, 4.0), -3.0 - 2.0);
}

#[test]
fn config_errors_for_weights() {
    let cfg = small_config(Activation::Relu);
    let m = SvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let x = Tensor::full(&[1, 6], 0.5);
    let noise = Tensor::zeros(&[1, 4]);
    for (b, a) in [(0.0, 1.0), (1.0, 1.0), (1.5, 1.0), (0.5, 0.0), (0.5, -2.0)] {
        assert!(matches!(m.svae_elbo(&x, &[0], b, a, &noise), Err(Error::Config(_))));
    }
}

#[test]
fn classifier_rejects_full_latent() {
    let cfg = small_config(Activation::Relu);
    let m = SvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(matches!(m.classify_latent(&[0.0; 4]), Err(Error::LatentSplit(_))));
    assert!(m.classify_latent(&[0.0; 2]).is_ok());
}

#[test]
fn input_validation() {
    let cfg = small_config(Activation::Relu);
    let m = SvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert!(m.encode_x(&[0.5; 5]).is_err());
    assert!(matches!(m.encode_x(&[1.5; 6]), Err(Error::Domain(_))));
    assert!(matches!(m.encode_xy(&[0.5; 6], 3), Err(Error::Label { .. })));
    assert!(m.decode(&[0.0; 3]).is_err());
}

#[test]
fn decode_matches_matrix_oracle() {
    let cfg = small_config(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut m = SvaeModel::new(cfg, &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    let z = [0.3, -0.7, 1.1, 0.05];
    let got = m.decode(&z).unwrap();

    let p = m.params();
    let layer = |h: &[f64], i: usize, act: bool| -> Vec<f64> {
        let w = p.by_name(&format!("dec.{i}.weight")).unwrap();
        let b = p.by_name(&format!("dec.{i}.bias")).unwrap();
        let (rows, cols) = w.dims2().unwrap();
        (0..cols)
            .map(|j| {
                let s: f64 = (0..rows).map(|r| h[r] * w.data()[r * cols + j]).sum::<f64>() + b.data()[j];
                if act {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect()
    };
    let h = layer(&z, 0, true);
    let want = layer(&h, 1, false);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn deterministic_outputs() {
    let cfg = small_config(Activation::Relu);
    let m = SvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let x = vec![0.25; 6];
    assert_eq!(m.encode_x(&x).unwrap(), m.encode_x(&x).unwrap());
    assert_eq!(m.encode_xy(&x, 1).unwrap(), m.encode_xy(&x, 1).unwrap());
    let a = m.classify(&x, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = m.classify(&x, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn classify_with_degenerate_posterior_equals_mean_classification() {
    let cfg = small_config(Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut m = SvaeModel::new(cfg, &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    // drive the log-std half of the label-free encoder's output to a huge negative value
    let p = m.params_mut();
    let id = p.id("enc_x.1.bias").unwrap();
    let mut bias = p.get(id).data().to_vec();
    let d = bias.len() / 2;
    bias[d..].iter_mut().for_each(|v| *v = -60.0);
    *p.get_mut(id) = Tensor::vector(bias).unwrap();
    let wid = p.id("enc_x.1.weight").unwrap();
    let mut w = p.get(wid).clone().into_data();
    let cols = 2 * d;
    for r in 0..w.len() / cols {
        w[r * cols + d..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
    }
    let shape = p.get(wid).shape().to_vec();
    *p.get_mut(wid) = Tensor::new(shape, w).unwrap();

    let x = vec![0.6; 6];
    let q = m.encode_x(&x).unwrap();
    let direct = m.classify_latent(&q.mean()[..2]).unwrap().probs();
    let mc = m.classify(&x, 1, &mut rng).unwrap().probs();
    for (a, b) in direct.iter().zip(&mc) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn z2_never_reaches_classifier() {
    let cfg = small_config(Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = SvaeModel::new(cfg, &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    // the recorded graph for the classifier term only depends on the first d1 columns
    let z = normal_tensor(&mut rng, &[3, 4], 1.0);
    let mut tape = Tape::new();
    let bound = tape.bind(m.params());
    let zv = tape.variable(z);
    let z1 = tape.slice_cols(zv, 0, 2).unwrap();
    let logits = m.classify_latent_graph(&mut tape, &bound, z1).unwrap();
    let s = tape.sum(logits);
    let g = tape.backward(s).unwrap().wrt(&tape, zv);
    for r in 0..3 {
        assert_eq!(&g.row(r)[2..], &[0.0, 0.0]);
    }
}

fn check_gradients(
    params: &mut ParamSet,
    mut total: impl FnMut(&ParamSet) -> f64,
    analytic: &ParamSet,
    rng: &mut impl Rng,
    coords_per_tensor: usize,
) {
    let eps = 1e-5;
    for ti in 0..params.len() {
        let id = svae_core::ParamId(ti);
        let n = params.get(id).len();
        for _ in 0..coords_per_tensor.min(n) {
            let k = rng.gen_range(0..n);
            let orig = params.get(id).data()[k];
            let bump = |v: f64, params: &mut ParamSet| {
                let mut d = params.get(id).clone().into_data();
                d[k] = v;
                let shape = params.get(id).shape().to_vec();
                *params.get_mut(id) = Tensor::new(shape, d).unwrap();
            };
            bump(orig + eps, params);
            let up = total(params);
            bump(orig - eps, params);
            let down = total(params);
            bump(orig, params);
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.get(id).data()[k];
            assert!(
                rel_err(an, fd) <= 1e-5,
                "{}[{k}]: analytic {an} vs finite difference {fd}",
                params.name(id)
            );
        }
    }
}

#[test]
fn svae_gradient_matches_finite_differences() {
    let cfg = small_config(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = SvaeModel::new(cfg.clone(), &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    let x = uniform_images(&mut rng, 4, 6);
    let labels = [0, 2, 1, 2];
    let noise = normal_tensor(&mut rng, &[4, 4], 1.0);
    let weights = svae_core::models::ElboWeights::new(0.7, 3.0).unwrap();

    let analytic = {
        let mut tape = Tape::new();
        let bound = tape.bind(m.params());
        let vars = m.elbo_graph(&mut tape, &bound, &x, &labels, weights, noise.clone()).unwrap();
        tape.backward(vars.total).unwrap().for_params(&bound, m.params())
    };
    let mut params = m.into_params();
    check_gradients(
        &mut params,
        |p| {
            let m = SvaeModel::from_params(cfg.clone(), p.clone()).unwrap();
            m.svae_elbo(&x, &labels, 0.7, 3.0, &noise).unwrap().total
        },
        &analytic,
        &mut rng,
        4,
    );
}

#[test]
fn zero_init_semivae_closed_form() {
    let cfg = small_config(Activation::Relu);
    let mut m = SemiVaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    m.zero_output_layers();
    let x = Tensor::full(&[2, 6], 0.5);
    let noise = normal_tensor(&mut ChaCha8Rng::seed_from_u64(14), &[6, 4], 1.0);
    let alpha = 2.5;
    let t = m.semivae_elbo(&x, &[0, 2], alpha, &noise).unwrap();
    let u = -6.0 * LN2;
    let ln_c = 3.0f64.ln();
    assert!((t.labeled_u - u).abs() < 1e-12);
    assert!((t.marginal_u - u).abs() < 1e-12);
    assert!((t.entropy - ln_c).abs() < 1e-12);
    assert!((t.classifier_loglik + ln_c).abs() < 1e-12);
    assert!((t.total - (2.0 * u + ln_c - alpha * ln_c)).abs() < 1e-12);
    let probs = m.semivae_classify(&[0.1; 6]).unwrap().probs();
    assert!(probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn semivae_entropy_bounds_and_total() {
    let cfg = small_config(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut m = SemiVaeModel::new(cfg, &mut rng).unwrap();
    for _ in 0..5 {
        randomize(m.params_mut(), &mut rng);
        let x = uniform_images(&mut rng, 3, 6);
        let noise = normal_tensor(&mut rng, &[9, 4], 1.0);
        let t = m.semivae_elbo(&x, &[1, 1, 0], 7.0, &noise).unwrap();
        assert!(t.entropy >= 0.0 && t.entropy <= 3.0f64.ln() + 1e-12);
        let re = t.labeled_u + t.marginal_u + t.entropy + 7.0 * t.classifier_loglik;
        assert!((re - t.total).abs() < 1e-10);
    }
}

#[test]
fn semivae_gradient_matches_finite_differences() {
    let cfg = small_config(Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut m = SemiVaeModel::new(cfg.clone(), &mut rng).unwrap();
    randomize(m.params_mut(), &mut rng);
    let x = uniform_images(&mut rng, 3, 6);
    let labels = [2, 0, 1];
    let noise = normal_tensor(&mut rng, &[9, 4], 1.0);

    let analytic = {
        let mut tape = Tape::new();
        let bound = tape.bind(m.params());
        let vars = m.elbo_graph(&mut tape, &bound, &x, &labels, 1.5, noise.clone()).unwrap();
        tape.backward(vars.total).unwrap().for_params(&bound, m.params())
    };
    let mut params = m.into_params();
    check_gradients(
        &mut params,
        |p| {
            let m = SemiVaeModel::from_params(cfg.clone(), p.clone()).unwrap();
            m.semivae_elbo(&x, &labels, 1.5, &noise).unwrap().total
        },
        &analytic,
        &mut rng,
        4,
    );
}

#[test]
fn from_params_rejects_foreign_layout() {
    let cfg = small_config(Activation::Relu);
    let svae = SvaeModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    assert!(SemiVaeModel::from_params(cfg.clone(), svae.params().clone()).is_err());
    let mut bigger = cfg;
    bigger.split = LatentSplit::new(3, 2).unwrap();
    assert!(SvaeModel::from_params(bigger, svae.into_params()).is_err());
}
