mod common;

use common::{random_image, tiny_aae, BrightnessBox, ChannelBox};
use exemplar_core::aae::{sample_prior, LatentCode};
use exemplar_core::classifier::predict;
use exemplar_core::neighborhood::{
    elite_traces, fitness_eq, fitness_neq, generate_neighborhood, label_instance, label_instances, validate_latent,
    GeneticParams,
};
use exemplar_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params() -> GeneticParams {
    GeneticParams { population: 24, generations: 5, ..GeneticParams::default() }
}

fn center(seed: u64) -> LatentCode {
    let m = tiny_aae(8, 4, 0);
    sample_prior(&m.spec.prior, 1, &mut ChaCha8Rng::seed_from_u64(seed)).remove(0)
}

#[test]
fn partitions_follow_reference_label() {
    let m = tiny_aae(8, 4, 0);
    let bb = BrightnessBox::calibrated(&m);
    let mut checked = 0;
    for seed in 0..6 {
        let z = center(seed);
        match generate_neighborhood(&z, None, &bb, &m, &params(), seed) {
            Ok(n) => {
                checked += 1;
                assert!(!n.eq.is_empty() && !n.neq.is_empty());
                for &i in &n.eq {
                    assert!(n.instances[i].valid);
                    assert_eq!(n.instances[i].label, n.reference);
                }
                for &i in &n.neq {
                    assert!(n.instances[i].valid);
                    assert_ne!(n.instances[i].label, n.reference);
                }
                let mut covered: Vec<usize> = n.eq.iter().chain(&n.neq).copied().collect();
                covered.sort();
                let valid: Vec<usize> = (0..n.instances.len()).filter(|&i| n.instances[i].valid).collect();
                assert_eq!(covered, valid);
                assert_eq!(n.instances.len(), 24);
                assert!(n.instances.iter().all(|i| i.code.is_finite()));
                let total: usize = n.class_counts().values().sum();
                assert_eq!(total, n.valid_count());
            }
            Err(Error::DegenerateLocality { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked >= 3, "only {checked} of 6 neighborhoods were non-degenerate");
}

#[test]
fn same_seed_same_neighborhood() {
    let m = tiny_aae(8, 4, 0);
    let bb = BrightnessBox::calibrated(&m);
    let z = center(1);
    let a = generate_neighborhood(&z, None, &bb, &m, &params(), 42);
    let b = generate_neighborhood(&z, None, &bb, &m, &params(), 42);
    let json = |r: &exemplar_core::Result<exemplar_core::neighborhood::Neighborhood>| match r {
        Ok(n) => serde_json::to_string(&n.records()).unwrap(),
        Err(Error::DegenerateLocality { neighborhood, .. }) => serde_json::to_string(&neighborhood.records()).unwrap(),
        Err(e) => panic!("{e}"),
    };
    assert_eq!(json(&a), json(&b));
}

#[test]
fn zero_mutation_scale_is_degenerate() {
    let m = tiny_aae(8, 4, 0);
    let bb = ChannelBox::new(8);
    let z = center(2);
    let p = GeneticParams { mutation_scale: 0.0, ..params() };
    match generate_neighborhood(&z, None, &bb, &m, &p, 3) {
        Err(Error::DegenerateLocality { neighborhood, class }) => {
            assert_eq!(neighborhood.attempts, p.max_retries + 1);
            assert_eq!(neighborhood.reference.id, class);
            assert!(neighborhood.instances.iter().all(|i| i.code == z));
            assert!(neighborhood.neq.is_empty());
        }
        other => panic!("expected degenerate locality, got {other:?}"),
    }
}

#[test]
fn batch_labeling_equals_instance_labeling() {
    let m = tiny_aae(8, 4, 5);
    let bb = ChannelBox::new(8);
    let codes = sample_prior(&m.spec.prior, 70, &mut ChaCha8Rng::seed_from_u64(5));
    let batch = label_instances(&bb, &m, &codes, 0.5).unwrap();
    for (code, inst) in codes.iter().zip(&batch) {
        assert_eq!(&label_instance(&bb, &m, code, 0.5).unwrap(), inst);
    }
}

#[test]
fn encoded_input_is_labeled_by_its_reconstruction() {
    let m = tiny_aae(8, 4, 5);
    let bb = ChannelBox::new(8);
    let x = random_image(8, 8, 3, &mut ChaCha8Rng::seed_from_u64(1));
    let z = m.encode(&x).unwrap();
    let inst = label_instance(&bb, &m, &z, 0.5).unwrap();
    let (_, expected) = predict(&bb, &m.decode(&z).unwrap()).unwrap();
    assert_eq!(inst.label, expected);
    assert_eq!(inst.decoded, m.decode(&z).unwrap());
}

#[test]
fn validity_threshold_extremes() {
    let m = tiny_aae(8, 4, 5);
    for z in sample_prior(&m.spec.prior, 20, &mut ChaCha8Rng::seed_from_u64(9)) {
        assert!(validate_latent(&m, &z, 0.0).unwrap());
        assert!(!validate_latent(&m, &z, 1.0).unwrap());
    }
}

#[test]
fn invalid_instances_are_still_decoded() {
    let m = tiny_aae(8, 4, 5);
    let bb = ChannelBox::new(8);
    let z = center(4);
    let inst = label_instance(&bb, &m, &z, 0.999_999).unwrap();
    assert!(!inst.valid);
    assert_eq!(inst.decoded.dims(), (8, 8, 3));
}

#[test]
fn fitness_of_the_center() {
    let m = tiny_aae(8, 4, 5);
    let bb = ChannelBox::new(8);
    let z = center(6);
    assert_eq!(fitness_eq(&z, &z, &bb, &m).unwrap(), 1.0);
    assert_eq!(fitness_neq(&z, &z, &bb, &m).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn elite_fitness_never_decreases(seed in 0u64..1000) {
        let m = tiny_aae(8, 4, 0);
        let bb = ChannelBox::new(8);
        let z = center(seed);
        let reference = predict(&bb, &m.decode(&z).unwrap()).unwrap().1.id;
        let (eq, neq) = elite_traces(&z, reference, &bb, &m, &params(), seed).unwrap();
        prop_assert_eq!(eq.len(), 6);
        for t in [eq, neq] {
            for w in t.windows(2) {
                prop_assert!(w[1] >= w[0], "{:?}", t);
            }
        }
    }
}
