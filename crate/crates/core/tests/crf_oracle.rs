mod common;

use common::*;
use mecrf::autodiff::Tensor;
use mecrf::crf;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, t: usize, y: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_tensor(&mut rng, t, y, 2.0), random_tensor(&mut rng, y + 2, y + 2, 2.0))
}

proptest! {
    #[test]
    fn log_partition_matches_enumeration(seed in any::<u64>(), t in 1usize..=5, y in 1usize..=4) {
        let (em, a) = instance(seed, t, y);
        let z = crf::log_partition(&em, &a).unwrap();
        prop_assert!((z - brute_log_partition(&em, &a)).abs() < 1e-8);
    }

    #[test]
    fn marginals_match_enumeration(seed in any::<u64>(), t in 1usize..=5, y in 1usize..=4) {
        let (em, a) = instance(seed, t, y);
        let m = crf::marginals(&em, &a).unwrap();
        let want = brute_marginals(&em, &a);
        for i in 0..t {
            for l in 0..y {
                prop_assert!((m.get(i, l) - want[i][l]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn viterbi_matches_enumeration(seed in any::<u64>(), t in 1usize..=5, y in 1usize..=4) {
        let (em, a) = instance(seed, t, y);
        let path = crf::viterbi_decode(&em, &a).unwrap();
        let (want, best) = brute_viterbi(&em, &a);
        prop_assert_eq!(&path, &want);
        prop_assert!((crf::sequence_score(&em, &a, &path).unwrap() - best).abs() < 1e-10);
    }

    #[test]
    fn nll_is_nonnegative_and_normalised(seed in any::<u64>(), t in 1usize..=4, y in 1usize..=3) {
        let (em, a) = instance(seed, t, y);
        let total: f64 = all_paths(t, y)
            .iter()
            .map(|p| (-crf::crf_nll(&em, &a, p).unwrap()).exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for p in all_paths(t, y) {
            prop_assert!(crf::crf_nll(&em, &a, &p).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn shifting_emissions_of_a_step_leaves_marginals(seed in any::<u64>(), t in 1usize..=5, y in 1usize..=4, c in -5.0f64..5.0) {
        let (em, a) = instance(seed, t, y);
        let mut shifted = em.clone();
        for l in 0..y {
            shifted.data_mut()[l] += c;
        }
        let (m1, m2) = (crf::marginals(&em, &a).unwrap(), crf::marginals(&shifted, &a).unwrap());
        for (x, z) in m1.data().iter().zip(m2.data()) {
            prop_assert!((x - z).abs() < 1e-9);
        }
        let dz = crf::log_partition(&shifted, &a).unwrap() - crf::log_partition(&em, &a).unwrap();
        prop_assert!((dz - c).abs() < 1e-9);
    }
}

#[test]
fn viterbi_breaks_ties_toward_lower_labels() {
    let em = Tensor::zeros(3, 3);
    let a = Tensor::zeros(5, 5);
    assert_eq!(crf::viterbi_decode(&em, &a).unwrap(), vec![0, 0, 0]);
}

#[test]
fn gradients_match_central_differences() {
    let (em, a) = instance(11, 4, 3);
    let labels = [2, 0, 1, 1];
    let (_, ge, ga) = crf::nll_with_gradients(&em, &a, &labels).unwrap();
    let eps = 1e-6;
    for i in 0..em.data().len() {
        let (mut up, mut down) = (em.clone(), em.clone());
        up.data_mut()[i] += eps;
        down.data_mut()[i] -= eps;
        let fd = (crf::crf_nll(&up, &a, &labels).unwrap() - crf::crf_nll(&down, &a, &labels).unwrap()) / (2.0 * eps);
        assert!((fd - ge.data()[i]).abs() < 1e-6, "emission {i}: {fd} vs {}", ge.data()[i]);
    }
    for i in 0..a.data().len() {
        let (mut up, mut down) = (a.clone(), a.clone());
        up.data_mut()[i] += eps;
        down.data_mut()[i] -= eps;
        let fd = (crf::crf_nll(&em, &up, &labels).unwrap() - crf::crf_nll(&em, &down, &labels).unwrap()) / (2.0 * eps);
        assert!((fd - ga.data()[i]).abs() < 1e-6, "transition {i}: {fd} vs {}", ga.data()[i]);
    }
}
