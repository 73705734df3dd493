mod common;

use common::{aae_gradient_error, tiny_aae, AaeLoss};
use exemplar_core::aae::{minibatch_features, sample_prior, LatentCode, MbdConfig, OptState, PriorSpec};
use exemplar_core::data::{mean_pairwise_distance, synthetic_blobs};
use exemplar_core::image::Image;
use exemplar_core::progressive::{
    build_stage, diversity_metric, shared_tensor_names, stage_plan, train_progressive, ProgressiveHyper,
};
use exemplar_nn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let (err, n) = aae_gradient_error(AaeLoss::Reconstruction, 1);
    assert!(n > 100);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let (err, _) = aae_gradient_error(AaeLoss::Discriminator, 2);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn generator_gradients_match_finite_differences() {
    let (err, _) = aae_gradient_error(AaeLoss::Generator, 3);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn reconstruction_loss_decreases() {
    let data = synthetic_blobs(64, 8, 5);
    let mut m = tiny_aae(8, 4, 5);
    let mut opt = OptState::new(1e-2, 2e-4, 2e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut losses = Vec::new();
    for step in 0..200 {
        let start = (step * 16) % 64;
        let batch = &data.images[start..start + 16];
        losses.push(m.reconstruction_step(batch, 0.1, &mut opt, &mut rng).unwrap());
    }
    let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < 0.5 * first, "first window {first}, last window {last}");
}

#[test]
fn zero_noise_reconstruction_is_plain_autoencoding() {
    let data = synthetic_blobs(8, 8, 9);
    let m = tiny_aae(8, 4, 9);
    let clean = Image::batch_tensor(&data.images).unwrap();

    let mut a = m.clone();
    let mut opt = OptState::new(1e-3, 1e-3, 1e-3);
    let stepped = a.reconstruction_step(&data.images, 0.0, &mut opt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut b = m.clone();
    let z = b.encoder.forward(&clean, true).unwrap();
    let out = b.decoder.forward(&z, true).unwrap();
    let mse = out.data().iter().zip(clean.data()).map(|(o, c)| (o - c) * (o - c)).sum::<f64>() / clean.len() as f64;
    assert_eq!(stepped.to_bits(), mse.to_bits());
}

#[test]
fn regularization_step_reports_finite_losses() {
    let data = synthetic_blobs(16, 8, 1);
    let mut m = tiny_aae(8, 4, 1);
    let mut opt = OptState::new(1e-3, 1e-3, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prior = m.spec.prior.clone();
    let (d, g) = m.regularization_step(&data.images, &prior, 0.1, &mut opt, &mut rng).unwrap();
    assert!(d.is_finite() && d > 0.0);
    assert!(g.is_finite() && g > 0.0);
}

#[test]
fn prior_mean_is_centered() {
    let prior = PriorSpec::standard(4);
    let draws = sample_prior(&prior, 100_000, &mut ChaCha8Rng::seed_from_u64(11));
    for i in 0..4 {
        let mean = draws.iter().map(|c| c.0[i]).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() <= 0.02, "dimension {i} mean {mean}");
    }
}

#[test]
fn constant_decoder_has_zero_diversity() {
    let mut m = tiny_aae(8, 4, 4);
    for p in m.decoder.part_mut("to_rgb").unwrap().params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let d = diversity_metric(&m, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn two_sample_diversity_is_their_distance() {
    let m = tiny_aae(8, 4, 4);
    let d = diversity_metric(&m, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let codes = sample_prior(&m.spec.prior, 2, &mut ChaCha8Rng::seed_from_u64(8));
    let imgs = m.decode_batch(&codes).unwrap();
    let sq: f64 = imgs[0].pixels().iter().zip(imgs[1].pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    let expected = (sq / imgs[0].pixels().len() as f64).sqrt();
    assert!((d - expected).abs() < 1e-12);
    assert!(diversity_metric(&m, 1, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
}

#[test]
fn mean_pairwise_distance_of_identical_images_is_zero() {
    let img = Image::filled(4, 4, 3, 0.3).unwrap();
    assert_eq!(mean_pairwise_distance(&[img.clone(), img.clone(), img]), 0.0);
}

fn mbd_kernel(f: usize, cfg: MbdConfig, seed: u64) -> Tensor {
    Tensor::randn(&[f, cfg.kernels * cfg.dims], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn minibatch_features_identical_batch() {
    let cfg = MbdConfig { kernels: 4, dims: 3 };
    let kernel = mbd_kernel(5, cfg, 1);
    for n in [2usize, 4, 16] {
        let row: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let x = Tensor::from_vec(&[n, 5], row.repeat(n)).unwrap();
        let o = minibatch_features(&x, &kernel, cfg).unwrap();
        assert_eq!(o.shape(), &[n, 4]);
        assert!(o.data().iter().all(|&v| v == (n - 1) as f64), "n = {n}");
    }
}

#[test]
fn minibatch_features_reject_zero_sizes() {
    let x = Tensor::zeros(&[2, 3]);
    assert!(minibatch_features(&x, &Tensor::zeros(&[3, 0]), MbdConfig { kernels: 0, dims: 2 }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minibatch_features_permutation_equivariant(seed in 0u64..10_000, n in 2usize..12) {
        let cfg = MbdConfig { kernels: 3, dims: 2 };
        let kernel = mbd_kernel(4, cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 4..i * 4 + 4].to_vec()).collect();
        let o = minibatch_features(&x, &kernel, cfg).unwrap();
        let po = minibatch_features(&Tensor::from_vec(&[n, 4], px).unwrap(), &kernel, cfg).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for b in 0..3 {
                prop_assert!((po.data()[new_i * 3 + b] - o.data()[old_i * 3 + b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_distance_is_a_scaled_metric(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
        let (x, y) = (LatentCode(a.clone()), LatentCode(b.clone()));
        let euclid = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        prop_assert!((x.normalized_distance(&y) - euclid / 2.0).abs() < 1e-12);
        prop_assert_eq!(x.normalized_distance(&y), y.normalized_distance(&x));
        prop_assert_eq!(x.normalized_distance(&x), 0.0);
    }
}

#[test]
fn discriminator_scores_are_probabilities() {
    let m = tiny_aae(8, 4, 3);
    let codes = sample_prior(&m.spec.prior, 9, &mut ChaCha8Rng::seed_from_u64(3));
    for s in m.discriminate(&codes).unwrap().into_iter().chain(m.validity_scores(&codes).unwrap()) {
        assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn validity_score_ignores_other_codes() {
    let m = tiny_aae(8, 4, 3);
    let codes = sample_prior(&m.spec.prior, 5, &mut ChaCha8Rng::seed_from_u64(4));
    let together = m.validity_scores(&codes).unwrap();
    for (i, c) in codes.iter().enumerate() {
        assert_eq!(m.validity_scores(std::slice::from_ref(c)).unwrap()[0], together[i]);
    }
}

fn desk_like_hyper() -> ProgressiveHyper {
    ProgressiveHyper {
        latent_dim: 4,
        filter_base: 2,
        filter_cap: 4,
        width_per_stage: 4,
        epochs: vec![1],
        batch_size: 16,
        eval_images: 8,
        diversity_samples: 4,
        mbd: MbdConfig { kernels: 2, dims: 2 },
        ..ProgressiveHyper::desk()
    }
}

#[test]
fn grown_stage_copies_shared_tensors_bit_for_bit() {
    let hyper = desk_like_hyper();
    let plan = stage_plan(7, 28, &hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s1 = build_stage(&plan.stages[0], 7, &hyper, None, &mut rng).unwrap();
    let s2 = build_stage(&plan.stages[1], 7, &hyper, Some(&s1), &mut rng).unwrap();
    let names = shared_tensor_names(&s1);
    assert!(!names.is_empty());
    let c1 = s1.to_checkpoint().unwrap();
    let c2 = s2.to_checkpoint().unwrap();
    for n in &names {
        let a = c1.get(n).unwrap();
        let b = c2.get(n).unwrap();
        assert_eq!(a.shape(), b.shape(), "{n}");
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n}");
    }
    // The discriminator is rebuilt wider, never copied.
    assert!(s2.discriminator.param_count() > s1.discriminator.param_count());
    assert!(build_stage(&plan.stages[2], 7, &hyper, Some(&s1), &mut rng).is_err());
    assert!(build_stage(&plan.stages[1], 7, &hyper, None, &mut rng).is_err());
}

#[test]
fn progressive_training_writes_stage_checkpoints() {
    let hyper = desk_like_hyper();
    let plan = stage_plan(7, 14, &hyper).unwrap();
    let data = synthetic_blobs(32, 14, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let (m, stages) = train_progressive(&data, &plan, &hyper, Some(dir.path()), &mut |_| seen += 1).unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(m.resolution(), 14);
    assert!(seen > 0);
    assert!(stages[1].transfer_rmse.is_some() && stages[0].transfer_rmse.is_none());
    for s in &stages {
        assert!(s.final_rmse.is_finite());
        let path = dir.path().join(exemplar_core::progressive::stage_file_name(s.stage_index, s.resolution));
        let c = exemplar_core::checkpoint::Checkpoint::load(&path).unwrap();
        assert_eq!(c.meta["stage_index"], s.stage_index);
        assert_eq!(c.meta["resolution"], s.resolution);
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = tiny_aae(8, 4, 12);
    let c = m.to_checkpoint().unwrap();
    let bytes = c.to_bytes().unwrap();
    let back = exemplar_core::aae::AaeModel::from_checkpoint(
        &exemplar_core::checkpoint::Checkpoint::from_bytes(&bytes).unwrap(),
    )
    .unwrap();
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    let z = LatentCode(vec![0.1, -0.2, 0.3, 0.0]);
    assert_eq!(m.decode(&z).unwrap(), back.decode(&z).unwrap());
}
