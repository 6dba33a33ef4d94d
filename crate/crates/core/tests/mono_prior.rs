use hiersplat_core::mono_prior::{
    align_depth, partition_frames, sample_image_sets, set_leader, ImageSetSpec, PriorDepth,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Least squares through an SVD solve of the stacked design matrix.
fn lstsq(prior: &[f64], target: &[f64], mask: &[bool]) -> (f64, f64) {
    let rows: Vec<usize> = (0..prior.len()).filter(|&i| mask[i]).collect();
    let a = DMatrix::from_fn(rows.len(), 2, |r, c| if c == 0 { prior[rows[r]] } else { 1.0 });
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|&i| target[i]));
    let x = a.svd(true, true).solve(&b, 1e-12).unwrap();
    (x[0], x[1])
}

proptest! {
    #[test]
    fn noiseless_priors_are_recovered(lambda in 0.2f64..5.0, tau in -1.0f64..1.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior: Vec<f64> = (0..200).map(|_| rng.random_range(0.3..4.0)).collect();
        let target: Vec<f64> = prior.iter().map(|p| lambda * p + tau).collect();
        let a = align_depth(&PriorDepth::new(0, prior), &target, &vec![1.0; 200], 0.5).unwrap();
        prop_assert!((a.lambda - lambda).abs() < 1e-9);
        prop_assert!((a.tau - tau).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_a_generic_least_squares_solver(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 150;
        let mut prior: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..4.0)).collect();
        prior[7] = 0.0;
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        let sil: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask: Vec<bool> = (0..n).map(|i| sil[i] > 0.4 && prior[i] > 0.0).collect();
        let a = align_depth(&PriorDepth::new(0, prior.clone()), &target, &sil, 0.4).unwrap();
        let (l, t) = lstsq(&prior, &target, &mask);
        prop_assert!((a.lambda - l).abs() < 1e-8 && (a.tau - t).abs() < 1e-8);
    }

    #[test]
    fn image_sets_partition_the_sequence(total in 2usize..120, count in 2usize..7, skip in 1usize..6) {
        let spec = ImageSetSpec { start: 0, count, skip };
        let sets = partition_frames(total, &spec).unwrap();
        let mut seen: Vec<usize> = sets.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..total).collect::<Vec<_>>());
        for s in &sets {
            prop_assert!(s.iter().all(|&i| set_leader(i, &spec) == s[0]));
            prop_assert!(s.len() <= count);
            prop_assert!(s.windows(2).all(|w| w[1] - w[0] == skip));
        }
    }
}

#[test]
fn sliding_sets_follow_start_and_stride() {
    let spec = ImageSetSpec { start: 2, count: 3, skip: 2 };
    let sets = sample_image_sets(11, &spec, 4).unwrap();
    assert_eq!(sets, vec![vec![2, 4, 6], vec![6, 8, 10], vec![10]]);
}
