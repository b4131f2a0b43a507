use snsqkd::*;

fn spec(budget: usize) -> OptimizationSpec {
    OptimizationSpec {
        budget,
        seed: 7,
        ..OptimizationSpec::default()
    }
}

fn geom(l_a: f64, l_b: f64) -> LinkGeometry {
    LinkGeometry::new(l_a, l_b).unwrap()
}

#[test]
fn symmetric_link_gives_symmetric_optimum() {
    let sys = SystemParams::default();
    let free = OptimizationSpec {
        tie_eps: false,
        tie_p_z: false,
        ..spec(1600)
    };
    let res = optimize(
        &sys,
        &geom(80.0, 80.0),
        &free,
        &FluctuationPolicy::default(),
    )
    .unwrap();
    let p = res.params;
    assert!(res.breakdown.r > 0.0);
    // Sending probabilities are allowed to split; only intensities must stay balanced.
    assert!((p.u_a / p.u_b - 1.0).abs() < 0.05, "{p:?}");
    assert!(res.breakdown.constraints.passes());
}

#[test]
fn asymmetric_beats_symmetric_baseline_at_50_150() {
    let sys = SystemParams::default();
    let g = geom(50.0, 150.0);
    let policy = FluctuationPolicy::asymptotic();
    let asym = optimize(&sys, &g, &spec(1600), &policy).unwrap();
    let sym = symmetric_baseline(&sys, &g, &spec(1600), &policy).unwrap();
    assert!(
        asym.breakdown.r >= sym.breakdown.r,
        "{} < {}",
        asym.breakdown.r,
        sym.breakdown.r
    );
    assert!(sym.breakdown.r > 0.0);
    assert!(asym.breakdown.constraints.passes());
}

#[test]
fn zero_budget_returns_best_starting_point() {
    let sys = SystemParams::default();
    let s = spec(0);
    let res = optimize(&sys, &geom(20.0, 40.0), &s, &FluctuationPolicy::default()).unwrap();
    assert_eq!(res.evaluations, s.restarts * s.candidates_per_restart);
    let best_start = res
        .restarts
        .iter()
        .map(|t| t.start_value)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(
        res.restarts
            .iter()
            .map(|t| t.final_value)
            .fold(f64::NEG_INFINITY, f64::max),
        best_start
    );
}

#[test]
fn baseline_equals_optimum_on_equal_arms() {
    let sys = SystemParams::default();
    let g = geom(60.0, 60.0);
    let policy = FluctuationPolicy::default();
    let a = optimize(&sys, &g, &spec(1600), &policy)
        .unwrap()
        .breakdown
        .r;
    let s = symmetric_baseline(&sys, &g, &spec(1600), &policy)
        .unwrap()
        .breakdown
        .r;
    assert!((a - s).abs() <= 0.02 * a, "{a} vs {s}");
}

#[test]
fn la_zero_layout_has_positive_rate_below_symmetric_link() {
    let sys = SystemParams::default();
    let policy = FluctuationPolicy::default();
    let la0 = optimize(&sys, &geom(0.0, 160.0), &spec(1600), &policy)
        .unwrap()
        .breakdown
        .r;
    let even = optimize(&sys, &geom(80.0, 80.0), &spec(1600), &policy)
        .unwrap()
        .breakdown
        .r;
    assert!(la0 > 0.0 && la0 < even, "{la0} vs {even}");
}

#[test]
fn reproducible_and_independent_of_execution() {
    let sys = SystemParams::default();
    let g = geom(30.0, 90.0);
    let policy = FluctuationPolicy::default();
    let seq = OptimizationSpec {
        execution: Execution::Sequential,
        ..spec(400)
    };
    let a = optimize(&sys, &g, &spec(400), &policy).unwrap();
    let b = optimize(&sys, &g, &spec(400), &policy).unwrap();
    let c = optimize(&sys, &g, &seq, &policy).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let other_seed = OptimizationSpec {
        seed: 8,
        ..spec(400)
    };
    let d = optimize(&sys, &g, &other_seed, &policy).unwrap();
    assert_ne!(a.restarts[0].start, d.restarts[0].start);
}

#[test]
fn restart_traces_never_decrease() {
    let sys = SystemParams::default();
    let res = optimize(
        &sys,
        &geom(40.0, 100.0),
        &spec(800),
        &FluctuationPolicy::default(),
    )
    .unwrap();
    assert_eq!(res.restarts.len(), 16);
    for t in &res.restarts {
        assert!(
            t.best_so_far.windows(2).all(|w| w[1] >= w[0]),
            "{:?}",
            t.best_so_far
        );
        assert!(t.final_value >= t.start_value);
    }
    assert!(res.evaluations <= 800 + 64);
}

#[test]
fn slice_count_grid_picks_the_best() {
    let sys = SystemParams::default();
    let g = geom(50.0, 150.0);
    let policy = FluctuationPolicy::default();
    let grid = OptimizationSpec {
        m_grid: Some(vec![8, 16, 32]),
        ..spec(800)
    };
    let res = optimize(&sys, &g, &grid, &policy).unwrap();
    assert!([8, 16, 32].contains(&res.m_slices));
    assert_eq!(res.breakdown.m_slices, res.m_slices);
    let fixed16 = optimize(&sys, &g, &spec(800), &policy).unwrap();
    assert!(res.breakdown.r_raw >= fixed16.breakdown.r_raw);
}
