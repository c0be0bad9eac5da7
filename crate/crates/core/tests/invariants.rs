use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shaper::heuristics::{cigar_scale, HeuristicSpec};
use shaper::search::{crossover, mutate};
use shaper::stats::{pearson, spearman};
use shaper::supernet::count_params;
use shaper::{BackboneConfig, DesignSpace, ShapeVector};

fn desk_shape() -> impl Strategy<Value = ShapeVector> {
    let dims = BackboneConfig::desk().allowed_dims;
    prop::collection::vec(prop::sample::select(dims), 4).prop_map(ShapeVector::new)
}

proptest! {
    #[test]
    fn mutation_and_crossover_stay_in_space(a in desk_shape(), b in desk_shape(), seed in any::<u64>(), p in 0.0f64..=1.0) {
        let space = BackboneConfig::desk().design_space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mutate(&a, p, &space, &mut rng).unwrap();
        prop_assert!(space.contains(&m));
        let c = crossover(&a, &b, &mut rng).unwrap();
        prop_assert!(space.contains(&c));
        for (i, &d) in c.dims().iter().enumerate() {
            prop_assert!(d == a.dims()[i] || d == b.dims()[i]);
        }
    }

    #[test]
    fn params_grow_with_every_dim(a in desk_shape(), b in desk_shape()) {
        let cfg = BackboneConfig::desk();
        let lo = ShapeVector::new(a.dims().iter().zip(b.dims()).map(|(&x, &y)| x.min(y)).collect());
        prop_assert!(count_params(&cfg, &lo).unwrap() <= count_params(&cfg, &a).unwrap());
        if lo != a {
            prop_assert!(count_params(&cfg, &lo).unwrap() < count_params(&cfg, &a).unwrap());
        }
    }

    #[test]
    fn cigar_scaling_is_monotone_in_target(reference in desk_shape(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let cfg = BackboneConfig::desk();
        let space = cfg.design_space().unwrap();
        let min = count_params(&cfg, &space.smallest()).unwrap() as f64;
        let max = count_params(&cfg, &space.largest()).unwrap() as f64;
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let scale = |t: f64| {
            let spec = HeuristicSpec { reference: reference.clone(), target_params: (min + t * (max - min)) as u64, early_middle: None };
            cigar_scale(&spec, &cfg).unwrap()
        };
        let (small, large) = (scale(lo), scale(hi));
        prop_assert!(space.contains(&small) && space.contains(&large));
        prop_assert!(small.le_elementwise(&large));
    }

    #[test]
    fn spearman_ignores_joint_permutation_and_monotone_maps(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40),
        shift in 0usize..40,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let Ok(base) = spearman(&a, &b) else { return Ok(()) };
        let n = a.len();
        let rot = |v: &[f64]| (0..n).map(|i| v[(i + shift) % n]).collect::<Vec<_>>();
        prop_assert!((spearman(&rot(&a), &rot(&b)).unwrap() - base).abs() < 1e-12);
        let cubed: Vec<f64> = a.iter().map(|x| x.powi(3) + 7.0).collect();
        prop_assert!((spearman(&cubed, &b).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        prop_assert!(pearson(&a, &b).unwrap().abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn mutation_rate_matches_probability() {
    let space = DesignSpace::new(vec![16, 32, 48, 64], 4).unwrap();
    let parent = ShapeVector::new(vec![16, 32, 48, 64]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut changed = 0;
    let draws = 10_000;
    for _ in 0..draws {
        let child = mutate(&parent, 0.4, &space, &mut rng).unwrap();
        changed += child.dims().iter().zip(parent.dims()).filter(|(a, b)| a != b).count();
    }
    let rate = changed as f64 / (draws * 4) as f64;
    assert!((0.37..=0.43).contains(&rate), "rate {rate}");
}

#[test]
fn crossover_draws_evenly_from_parents() {
    let a = ShapeVector::new(vec![16; 8]);
    let b = ShapeVector::new(vec![64; 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut from_a = 0;
    for _ in 0..2_000 {
        from_a += crossover(&a, &b, &mut rng).unwrap().dims().iter().filter(|&&d| d == 16).count();
    }
    let share = from_a as f64 / 16_000.0;
    assert!((0.47..=0.53).contains(&share), "share {share}");
}

#[test]
fn single_option_space_mutates_to_itself() {
    let space = DesignSpace::new(vec![32], 3).unwrap();
    let s = ShapeVector::new(vec![32; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(mutate(&s, 1.0, &space, &mut rng).unwrap(), s);
}
