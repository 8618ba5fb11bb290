use anymod_core::cohort::{generate_synthetic_cohort, MissingnessProfile, Split, SyntheticCohortConfig};
use anymod_core::eval::nested_subsamples;
use anymod_core::finetune::{modality_dropout, Task};
use anymod_core::masking::{apportion, gumbel_top_k_mask, mask_probabilities, plan_from_counts, allocate_visible_budget, MaskingConfig};
use anymod_core::metrics::auc;
use anymod_core::modality::sample_modality_subset;
use anymod_core::objectives::per_patch_normalize;
use anymod_core::rng::stream;
use anymod_core::volume::{partition_patches, unpartition_patches, PatchGrid, Shape3, Volume};
use anymod_core::ModalitySet;
use proptest::prelude::*;

fn observed_set() -> impl Strategy<Value = ModalitySet> {
    (1u8..16).prop_map(ModalitySet::from_bits)
}

proptest! {
    #[test]
    fn normalized_patches_are_centered_and_unit_variance(v in prop::collection::vec(-100.0f64..100.0, 8..200)) {
        let n = per_patch_normalize(&v);
        let len = n.len() as f64;
        let mean = n.iter().sum::<f64>() / len;
        let raw_mean = v.iter().sum::<f64>() / len;
        let raw_var = v.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / len;
        let var = n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - raw_var / (raw_var + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn apportion_conserves_the_capped_budget(
        shares in prop::collection::vec(0.0f64..1.0, 1..5),
        budget in 0usize..400,
        cap in 1usize..128,
    ) {
        let counts = apportion(&shares, budget, cap);
        prop_assert_eq!(counts.len(), shares.len());
        prop_assert_eq!(counts.iter().sum::<usize>(), budget.min(cap * shares.len()));
        prop_assert!(counts.iter().all(|&c| c <= cap));
    }

    #[test]
    fn mask_plans_partition_every_observed_modality(observed in observed_set(), seed in any::<u64>(), n in 1usize..80) {
        let mut rng = stream(&[seed]);
        let counts = allocate_visible_budget(observed, n, &MaskingConfig::default(), &mut rng).unwrap();
        let plan = plan_from_counts(observed, n, &counts, None, &mut rng).unwrap();
        plan.check().unwrap();
        for m in observed.iter() {
            prop_assert_eq!(plan.visible(m).len() + plan.masked(m).len(), n);
            prop_assert_eq!(plan.visible(m).len(), counts[m.index()]);
        }
    }

    #[test]
    fn gumbel_top_k_returns_k_distinct_sorted_indices(
        scores in prop::collection::vec(-3.0f64..3.0, 1..40),
        tau in 0.1f64..10.0,
        seed in any::<u64>(),
        frac in 0.0f64..=1.0,
    ) {
        let p = mask_probabilities(&scores, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let k = (frac * p.len() as f64) as usize;
        let chosen = gumbel_top_k_mask(&p, k, &mut stream(&[seed])).unwrap();
        prop_assert_eq!(chosen.len(), k);
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(chosen.iter().all(|&i| i < p.len()));
    }

    #[test]
    fn sampled_subsets_stay_within_the_observed_set(observed in observed_set(), seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let mut rng = stream(&[seed]);
        let s = sample_modality_subset(observed, &mut rng).unwrap();
        prop_assert!(!s.is_empty() && s.is_subset_of(observed));
        let d = modality_dropout(observed, rate, &mut rng).unwrap();
        prop_assert!(!d.is_empty() && d.is_subset_of(observed));
    }

    #[test]
    fn auc_matches_pairwise_counting(pairs in prop::collection::vec((0u8..10, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let mut wins = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let want = wins / (pos * (labels.len() - pos)) as f64;
        prop_assert!((auc(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn patch_partition_round_trips(bz in 1usize..4, by in 1usize..4, bx in 1usize..4, p in 1usize..5, seed in any::<u64>()) {
        let shape = Shape3 { d: bz * p, h: by * p, w: bx * p };
        let grid = PatchGrid::new(shape, p).unwrap();
        let data: Vec<f32> = (0..shape.voxels()).map(|i| (anymod_core::rng::derive_seed(&[seed, i as u64]) % 1000) as f32).collect();
        let v = Volume::new(shape, data).unwrap();
        let patches = partition_patches(&v, &grid).unwrap();
        prop_assert_eq!(patches.len(), bz * by * bx);
        prop_assert_eq!(unpartition_patches(&patches, &grid).unwrap(), v);
    }
}

#[test]
fn label_subsamples_are_nested_and_stratified() {
    let cfg = SyntheticCohortConfig { n_subjects: 80, volume_shape: Shape3::cube(16), n_regions: 6, ..Default::default() };
    let (cohort, _, _) = generate_synthetic_cohort(&cfg).unwrap();
    let train: Vec<_> = cohort.indices(Split::Train).into_iter().map(|i| &cohort.subjects[i]).collect();
    let fractions = [0.25, 0.5, 0.75, 1.0];
    let sets = nested_subsamples(&train, Task::CnVsAd, &fractions, 9).unwrap();
    for w in sets.windows(2) {
        assert!(w[0].iter().all(|i| w[1].contains(i)));
        assert!(w[0].len() < w[1].len());
    }
    let labeled: Vec<usize> = (0..train.len()).filter(|&i| Task::CnVsAd.target(&train[i].labels).is_some()).collect();
    assert_eq!(sets[3], labeled);
    assert_eq!(sets, nested_subsamples(&train, Task::CnVsAd, &fractions, 9).unwrap());
}

#[test]
fn synthetic_cohort_is_deterministic_and_valid() {
    let cfg = SyntheticCohortConfig {
        n_subjects: 30,
        volume_shape: Shape3::cube(16),
        n_regions: 6,
        seed: 4,
        missingness: MissingnessProfile { t2: 0.5, flair: 0.5, pet: 0.5 },
        ..Default::default()
    };
    let (a, atlas_a, za) = generate_synthetic_cohort(&cfg).unwrap();
    let (b, atlas_b, zb) = generate_synthetic_cohort(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(atlas_a, atlas_b);
    assert_eq!(za, zb);
    a.validate().unwrap();
    for s in &a.subjects {
        assert!(s.observed.contains(anymod_core::Modality::T1));
        for m in anymod_core::Modality::ALL {
            assert_eq!(s.volume(m).is_some(), s.observed.contains(m));
        }
    }
}
