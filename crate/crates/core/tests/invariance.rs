use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use svae_core::data::{synth_toy_dataset, Dataset};
use svae_core::distributions::{argmax, kl_diag_gaussians, pixel_means};
use svae_core::invariance::{
    counterfactual, explore_grid, generate_invariant, generate_with_z2, invariance_test, render, InvariantOptions,
    DEFAULT_SIGMAS,
};
use svae_core::mlp::Activation;
use svae_core::models::{Architecture, LatentSplit, ModelKind, SvaeModel};
use svae_core::training::{train, TrainConfig};
use svae_core::{Error, Tensor};

struct Toy {
    model: SvaeModel,
    test: Dataset,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = TrainConfig {
            model_kind: ModelKind::Svae,
            beta: 0.9,
            alpha: 50.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 11,
            split: LatentSplit::new(4, 3).unwrap(),
            architecture: Architecture {
                encoder_hidden: vec![64, 32],
                decoder_hidden: vec![32, 64],
                classifier_hidden: vec![16],
                hidden_activation: Activation::Softplus,
            },
            eval_samples: 16,
        };
        let train_set = synth_toy_dataset(1, 400, 4, (8, 8)).unwrap();
        let ck = train(&cfg, &train_set, None).unwrap();
        let model = match ck.into_model().unwrap() {
            svae_core::models::Model::Svae(m) => m,
            _ => unreachable!(),
        };
        Toy {
            model,
            test: synth_toy_dataset(2, 50, 4, (8, 8)).unwrap(),
        }
    })
}

#[test]
fn tiny_sigma_reproduces_reconstruction() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = test.image(3);
    let s = generate_invariant(model, x, 1e-8, &InvariantOptions::default(), &mut rng).unwrap();
    let recon = generate_with_z2(model, x, &[0.0; 3]).unwrap();
    for (a, b) in s.transformed.iter().zip(&recon) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(s.original, x);
    assert_eq!(s.z2_used.len(), 3);
}

#[test]
fn nuisance_resampling_never_moves_the_classifier() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..test.len() {
        let mut z = model.encode_x(test.image(i)).unwrap().mean().to_vec();
        let before = model.classify_code(&z).unwrap();
        for v in &mut z[4..] {
            *v = 3.0 * rng.sample::<f64, _>(StandardNormal);
        }
        assert_eq!(model.classify_code(&z).unwrap(), before);
    }
}

#[test]
fn resampled_images_keep_their_class() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = InvariantOptions::default();
    let kept = (0..test.len())
        .filter(|&i| {
            let s = generate_invariant(model, test.image(i), 1.0, &opts, &mut rng).unwrap();
            s.original_pred == s.transformed_pred
        })
        .count();
    assert!(kept as f64 >= 0.9 * test.len() as f64, "{kept}/{}", test.len());
}

#[test]
fn keep_class_option_retries() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = InvariantOptions {
        keep_class: true,
        ..InvariantOptions::default()
    };
    for i in 0..20 {
        let s = generate_invariant(model, test.image(i), 2.0, &opts, &mut rng).unwrap();
        assert_eq!(s.original_pred, s.transformed_pred);
    }
    assert!(generate_invariant(model, test.image(0), 0.0, &opts, &mut rng).is_err());
}

#[test]
fn retention_curve_shape() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let curve = invariance_test(model, test, &DEFAULT_SIGMAS, 10, 16, &mut rng).unwrap();
    assert_eq!(curve.sigma_grid, DEFAULT_SIGMAS.to_vec());
    assert!(curve.retention.iter().all(|r| (0.0..=1.0).contains(r)));
    for w in curve.retention.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{curve:?}");
    }
    let csv = curve.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("sigma,retention,mean_l2\n0.1,"));
}

#[test]
fn decoder_blind_to_nuisance_gives_full_retention() {
    let Toy { model, test } = toy();
    let mut blind = model.clone();
    let p = blind.params_mut();
    let id = p.id("dec.0.weight").unwrap();
    let w = p.get(id).clone();
    let (rows, cols) = w.dims2().unwrap();
    let mut data = w.into_data();
    data[4 * cols..rows * cols].iter_mut().for_each(|v| *v = 0.0);
    *p.get_mut(id) = Tensor::matrix(rows, cols, data).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let curve = invariance_test(&blind, test, &DEFAULT_SIGMAS, 2, 16, &mut rng).unwrap();
    assert!(curve.retention.iter().all(|&r| r == 1.0), "{curve:?}");
    for l in &curve.mean_l2 {
        assert!((l - curve.mean_l2[0]).abs() < 1e-12);
    }
}

#[test]
fn invariance_test_validates_arguments() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert!(invariance_test(model, test, &[], 1, 1, &mut rng).is_err());
    assert!(invariance_test(model, test, &[1.0, 0.5], 1, 1, &mut rng).is_err());
    assert!(invariance_test(model, test, &[1.0], 0, 1, &mut rng).is_err());
}

#[test]
fn grid_layout_and_offsets() {
    let Toy { model, test } = toy();
    let x = test.image(5);
    let mean = model.encode_x(x).unwrap().mean().to_vec();
    let single = explore_grid(model, x, 0, 2, 0.5, 0).unwrap();
    assert_eq!(single.images.len(), 1);
    assert_eq!(single.images[0], render(model, &mean).unwrap());

    let g = explore_grid(model, x, 0, 2, 0.5, 2).unwrap();
    assert_eq!(g.side(), 5);
    assert_eq!(g.images.len(), 25);
    for a in -2isize..=2 {
        for b in -2isize..=2 {
            let code = &g.codes[((a + 2) * 5 + (b + 2)) as usize];
            let mut want = mean.clone();
            want[4] += a as f64 * 0.5;
            want[6] += b as f64 * 0.5;
            assert_eq!(code, &want);
        }
    }
    assert_eq!(g.cell(0, 0), single.images[0].as_slice());
}

#[test]
fn grid_cells_keep_the_class() {
    let Toy { model, test } = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut kept, mut total) = (0, 0);
    for i in 0..20 {
        let x = test.image(i);
        let pred = model.classify(x, 32, &mut rng).unwrap().argmax();
        let g = explore_grid(model, x, 0, 1, 0.5, 2).unwrap();
        for img in &g.images {
            total += 1;
            if model.classify(img, 32, &mut rng).unwrap().argmax() == pred {
                kept += 1;
            }
        }
    }
    assert!(kept as f64 >= 0.9 * total as f64, "{kept}/{total}");
}

#[test]
fn grid_rejects_classifier_dimensions() {
    let Toy { model, test } = toy();
    let x = test.image(0);
    assert!(matches!(explore_grid(model, x, 0, 3, 0.5, 1), Err(Error::LatentSplit(_))));
    assert!(explore_grid(model, x, 1, 1, 0.5, 1).is_err());
    assert!(explore_grid(model, x, 0, 1, 0.0, 1).is_err());
}

#[test]
fn counterfactual_for_current_class_is_the_reconstruction() {
    let Toy { model, test } = toy();
    let x = test.image(0);
    let mean = model.encode_x(x).unwrap().mean().to_vec();
    let current = model.classify_code(&mean).unwrap().argmax();
    let cf = counterfactual(model, x, current, 500, 0.1).unwrap();
    assert_eq!(cf.iterations, 0);
    assert!(cf.converged);
    assert_eq!(cf.image, render(model, &mean).unwrap());
}

#[test]
fn counterfactuals_reach_every_class() {
    let Toy { model, test } = toy();
    for source in 0..4 {
        let i = (0..test.len()).find(|&i| test.label(i) == source).unwrap();
        let x = test.image(i);
        for target in 0..4 {
            let cf = counterfactual(model, x, target, 500, 0.1).unwrap();
            assert!(cf.probability >= 0.9, "{source}->{target}: {}", cf.probability);
            assert!(cf.converged);
            assert_eq!(&cf.z[4..], &cf.z_start[4..]);
            assert_eq!(argmax(&cf.probs), target);
        }
    }
    assert!(matches!(counterfactual(model, test.image(0), 4, 10, 0.1), Err(Error::Label { .. })));
}

#[test]
fn trained_toy_model_properties() {
    let Toy { model, test } = toy();
    let posts: Vec<_> = (0..test.len()).map(|i| model.encode_x(test.image(i)).unwrap()).collect();

    // z₁ posteriors are closer within a class than across classes
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..60 {
        for j in 0..60 {
            if i == j {
                continue;
            }
            let d = kl_diag_gaussians(&posts[i].marginal(0, 4).unwrap(), &posts[j].marginal(0, 4).unwrap()).unwrap();
            if test.label(i) == test.label(j) {
                same += d;
                ns += 1;
            } else {
                cross += d;
                nc += 1;
            }
        }
    }
    assert!(same / ns as f64 <= cross / nc as f64);

    // reconstructions from the posterior mean
    let mae: f64 = (0..test.len())
        .map(|i| {
            let r = pixel_means(&model.decode(posts[i].mean()).unwrap());
            r.iter().zip(test.image(i)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!(mae < 0.15, "mae {mae}");

    // latent classifier on held-out posterior means
    let correct = (0..test.len())
        .filter(|&i| model.classify_latent(&posts[i].mean()[..4]).unwrap().argmax() == test.label(i))
        .count();
    assert!(correct as f64 >= 0.98 * test.len() as f64);

    // Monte Carlo classifier converges
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let agree = (0..test.len())
        .filter(|&i| {
            let a = model.classify(test.image(i), 100, &mut rng).unwrap().argmax();
            let b = model.classify(test.image(i), 10_000, &mut rng).unwrap().argmax();
            a == b
        })
        .count();
    assert!(agree as f64 >= 0.99 * test.len() as f64);
}
