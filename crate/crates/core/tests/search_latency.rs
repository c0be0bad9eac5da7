use shaper::latency::{measure_latency, BenchParams, SystemClock};
use shaper::search::{brute_force_search, check_constraint, evolve, Constraint, SearchConfig, BRUTE_FORCE_CAP};
use shaper::supernet::count_params;
use shaper::{BackboneConfig, ShapeVector, Supernet};

fn toy() -> BackboneConfig {
    BackboneConfig {
        num_layers: 3,
        d_model: 8,
        d_attn: 8,
        d_ff: 16,
        heads: 2,
        vocab_size: 30,
        max_seq_len: 8,
        allowed_dims: vec![2, 4, 6],
        ..BackboneConfig::desk()
    }
}

#[test]
fn constrained_search_matches_brute_force() {
    let cfg = toy();
    let space = cfg.design_space().unwrap();
    // Two smallest dims and one middle dim: three permutations share this count.
    let count = count_params(&cfg, &ShapeVector::new(vec![2, 2, 4])).unwrap();
    let constraint = Constraint::ParamRange { min_params: count, max_params: count };
    let feasible: Vec<ShapeVector> = space
        .iter_all()
        .filter(|s| check_constraint(s, Some(&constraint), &cfg, None).unwrap().feasible)
        .collect();
    assert_eq!(feasible.len(), 3);

    let fitness = |s: &ShapeVector| {
        Ok(s.dims().iter().enumerate().map(|(i, &d)| ((d * (i + 3)) % 7) as f64).sum::<f64>())
    };
    let check = |s: &ShapeVector| check_constraint(s, Some(&constraint), &cfg, None);
    let oracle = brute_force_search(&space, &mut { fitness }, &mut { check }, BRUTE_FORCE_CAP).unwrap();
    assert!(feasible.contains(&oracle.shape));
    for seed in 0..5 {
        let config = SearchConfig { population_size: 10, iterations: 20, seed, ..SearchConfig::default() };
        let report = evolve(&space, &config, &mut { fitness }, &mut { check }).unwrap();
        assert_eq!(report.best.shape, oracle.shape, "seed {seed}");
        assert!(report.best.feasible);
    }
}

#[test]
fn largest_shape_is_not_faster_than_smallest() {
    let mut model = Supernet::build(BackboneConfig::desk(), 0).unwrap();
    let space = model.design_space();
    let bench = BenchParams { reps: 15, ..BenchParams::default() };
    let mut clock = SystemClock::default();
    let mut wins = 0;
    for _ in 0..20 {
        let small = measure_latency(&mut model, &space.smallest(), &bench, &mut clock).unwrap();
        let large = measure_latency(&mut model, &space.largest(), &bench, &mut clock).unwrap();
        wins += usize::from(large.median_ms >= small.median_ms);
    }
    assert!(wins >= 18, "S+ >= S- in {wins}/20 trials");
}
