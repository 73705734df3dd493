mod common;

use common::{balanced_accuracy_oracle, random_image};
use exemplar_core::checkpoint::Checkpoint;
use exemplar_core::classifier::{
    balanced_accuracy, predict, predict_labels, preprocess_eval, preprocess_train, AugmentConfig, ClassifierSpec,
    CnnClassifier,
};
use exemplar_core::data::synthetic_blobs;
use exemplar_core::image::Image;
use exemplar_nn::Adam;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(res: usize, filters: Vec<usize>, classes: usize) -> ClassifierSpec {
    ClassifierSpec {
        resolution: res,
        channels: 3,
        filters,
        bn_momentum: 0.9,
        class_codes: (0..classes).map(|i| format!("C{i}")).collect(),
    }
}

#[test]
fn bce_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = CnnClassifier::new(small_spec(8, vec![2], 3), &mut rng).unwrap();
    assert!(model.param_count() <= 1000);
    let images: Vec<Image> = (0..4).map(|_| random_image(8, 8, 3, &mut rng)).collect();
    let batch = Image::batch_tensor(&images).unwrap();
    let labels = [0, 2, 1, 2];

    let mut a = model.clone();
    a.net.zero_grad();
    a.bce_loss_grads(&batch, &labels).unwrap();
    let analytic: Vec<Vec<f64>> = a.net.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &ga) in grads.iter().enumerate() {
            let loss_at = |delta: f64| {
                let mut c = model.clone();
                c.net.params_mut()[pi].value.data_mut()[j] += delta;
                c.net.zero_grad();
                c.bce_loss_grads(&batch, &labels).unwrap()
            };
            let num = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            worst = worst.max((ga - num).abs() / ga.abs().max(num.abs()).max(1e-4));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn overfits_a_single_batch() {
    let data = synthetic_blobs(16, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = CnnClassifier::new(small_spec(8, vec![8], 4), &mut rng).unwrap();
    let batch = Image::batch_tensor(&data.images).unwrap();
    let mut opt = Adam::new(1e-2);
    for _ in 0..200 {
        model.net.zero_grad();
        model.bce_loss_grads(&batch, &data.labels).unwrap();
        opt.step(model.net.params_mut());
    }
    let preds = predict_labels(&model, &data.images).unwrap();
    assert_eq!(balanced_accuracy(&preds, &data.labels).unwrap(), 1.0);
}

#[test]
fn balanced_accuracy_edge_cases() {
    let truth = [0, 0, 1, 2, 2, 2, 3];
    assert_eq!(balanced_accuracy(&truth, &truth).unwrap(), 1.0);
    for c in 0..4 {
        assert_eq!(balanced_accuracy(&[c; 7], &truth).unwrap(), 0.25);
    }
    // Recalls 1/2, 1, 1/3 over three classes.
    let ba = balanced_accuracy(&[0, 1, 1, 2, 0, 0], &[0, 0, 1, 2, 2, 2]).unwrap();
    assert!((ba - (0.5 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
    assert!(balanced_accuracy(&[], &[]).is_err());
    assert!(balanced_accuracy(&[0], &[0, 1]).is_err());
}

fn fixture() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
}

proptest! {
    #[test]
    fn balanced_accuracy_matches_oracle((preds, truth) in fixture()) {
        prop_assert_eq!(balanced_accuracy(&preds, &truth).unwrap(), balanced_accuracy_oracle(&preds, &truth));
    }

    #[test]
    fn balanced_accuracy_permutation_invariant((preds, truth) in fixture(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
        let a = balanced_accuracy(&preds, &truth).unwrap();
        let b = balanced_accuracy(&p, &t).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_relabeling_invariant((preds, truth) in fixture(), seed in any::<u64>()) {
        let mut map: Vec<usize> = (0..5).collect();
        rand::seq::SliceRandom::shuffle(map.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let p: Vec<usize> = preds.iter().map(|&c| map[c]).collect();
        let t: Vec<usize> = truth.iter().map(|&c| map[c]).collect();
        let a = balanced_accuracy(&preds, &truth).unwrap();
        let b = balanced_accuracy(&p, &t).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = CnnClassifier::new(small_spec(8, vec![4], 3), &mut rng).unwrap();
    let bytes = model.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = CnnClassifier::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    let img = random_image(8, 8, 3, &mut rng);
    assert_eq!(predict(&model, &img).unwrap(), predict(&back, &img).unwrap());
}

#[test]
fn predict_rejects_wrong_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = CnnClassifier::new(small_spec(8, vec![4], 3), &mut rng).unwrap();
    assert!(predict(&model, &random_image(9, 8, 3, &mut rng)).is_err());
}

#[test]
fn preprocessing_produces_requested_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(30, 40, 3, &mut rng);
    let e = preprocess_eval(&img, 16, 14).unwrap();
    assert_eq!(e.dims(), (14, 14, 3));
    let aug = AugmentConfig::default();
    for _ in 0..10 {
        let t = preprocess_train(&img, &mut rng, 12, &aug).unwrap();
        assert_eq!(t.dims(), (12, 12, 3));
        assert!(t.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // The identity augmentation of a square image at its own size is a no-op.
    let sq = random_image(12, 12, 3, &mut rng);
    assert_eq!(preprocess_train(&sq, &mut rng, 12, &AugmentConfig::identity()).unwrap(), sq);
}
