mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamexec_core::model::{
    execution_dominated_latency, generation_dominated_latency, lower_bound, n_star, overhead_bound,
    parallel_closed_form, parallel_schedule, speedup_upper_bound, summarize, t_serial,
    uniform_latency, upper_bound, UniformParams,
};
use streamexec_core::{ModelError, ModelParams, Regime};

fn p1() -> ModelParams {
    ModelParams {
        total_tokens: 200.0,
        v_gen: 20.0,
        time_to_first_token: 500.0,
        chunk_count: 4,
        chunk_tokens: vec![50.0; 4],
        delta: vec![0.0; 4],
        setup: 1.0,
        exec: vec![100.0; 4],
        setup_full: 1.0,
        exec_full: 400.0,
    }
}

fn p2() -> ModelParams {
    ModelParams {
        total_tokens: 200.0,
        v_gen: 200.0,
        time_to_first_token: 0.0,
        chunk_count: 4,
        chunk_tokens: vec![50.0; 4],
        delta: vec![0.0; 4],
        setup: 1.0,
        exec: vec![999.0; 4],
        setup_full: 1.0,
        exec_full: 3996.0,
    }
}

#[test]
fn fixture_p1() {
    let p = p1();
    let s = parallel_schedule(&p).unwrap();
    assert_eq!(t_serial(&p).unwrap(), 10901.0);
    assert_eq!(s.t_g, [3000.0, 5500.0, 8000.0, 10500.0]);
    assert_eq!(s.t_e, [3101.0, 5601.0, 8101.0, 10601.0]);
    assert_eq!(s.parallel, 10601.0);
    assert_eq!(parallel_closed_form(&p).unwrap(), 10601.0);
    assert_eq!(upper_bound(&p).unwrap(), 10904.0);
    assert_eq!(overhead_bound(&p).unwrap(), 3.0);
    let lb = lower_bound(&p).unwrap();
    assert_eq!(
        (lb.gen_bound, lb.exec_bound, lb.composite),
        (10601.0, 3404.0, 10601.0)
    );
    assert!((speedup_upper_bound(&p).unwrap() - 10901.0 / 10601.0).abs() < 1e-12);
    assert!((speedup_upper_bound(&p).unwrap() - 1.0283).abs() < 5e-5);
    let u = uniform_latency(&UniformParams::from_params(&p).unwrap());
    assert_eq!(u.regime, Regime::GenerationDominated);
    assert_eq!(u.parallel, 10601.0);
}

#[test]
fn fixture_p2() {
    let p = p2();
    let s = parallel_schedule(&p).unwrap();
    assert_eq!(s.t_e, [1250.0, 2250.0, 3250.0, 4250.0]);
    assert_eq!(parallel_closed_form(&p).unwrap(), 4250.0);
    let lb = lower_bound(&p).unwrap();
    assert_eq!((lb.gen_bound, lb.exec_bound), (2000.0, 4250.0));
    let u = uniform_latency(&UniformParams::from_params(&p).unwrap());
    assert_eq!(u.regime, Regime::ExecutionDominated);
    assert_eq!(u.parallel, 4250.0);
}

#[test]
fn summary_is_consistent() {
    let s = summarize(&p1()).unwrap();
    assert_eq!(s.closed_form, s.schedule.parallel);
    assert!(s.realized_speedup <= s.speedup_upper_bound.unwrap());
    assert_eq!(s.n_star, Some(9600.0));
    let json = serde_json::to_value(&s).unwrap();
    assert_eq!(json["uniform"]["regime"], "R1_generation_dominated");
}

#[test]
fn invalid_params_are_rejected() {
    let mut p = p1();
    p.v_gen = 0.0;
    assert!(matches!(t_serial(&p), Err(ModelError::NonPositiveSpeed(_))));
    let mut p = p1();
    p.delta.pop();
    assert!(matches!(
        parallel_schedule(&p),
        Err(ModelError::LengthMismatch { .. })
    ));
    let mut p = p1();
    p.total_tokens = 201.0;
    assert!(matches!(
        upper_bound(&p),
        Err(ModelError::TokenSumMismatch { .. })
    ));
    assert!(matches!(n_star(1.0, 1.0, 0.0), Err(ModelError::ZeroSetup)));
}

#[test]
fn balanced_instances_coincide() {
    // alpha = 50 tokens at 20 TPS = 2500 ms = setup 500 + exec 2000
    let mut p = p1();
    p.setup = 500.0;
    p.exec = vec![2000.0; 4];
    p.exec_full = 8000.0;
    let u = UniformParams::from_params(&p).unwrap();
    assert_eq!(u.alpha, u.beta);
    let lat = uniform_latency(&u);
    assert_eq!(lat.regime, Regime::Balanced);
    assert_eq!(
        generation_dominated_latency(&u),
        execution_dominated_latency(&u)
    );
    assert_eq!(lat.parallel, parallel_schedule(&p).unwrap().parallel);
}

proptest! {
    #[test]
    fn closed_form_matches_recurrence_and_simulation(seed in any::<u64>()) {
        let p = common::random_params(&mut ChaCha8Rng::seed_from_u64(seed), 64);
        let sched = parallel_schedule(&p).unwrap();
        let sim = common::simulate(&p);
        for (a, b) in sched.t_e.iter().zip(&sim) {
            prop_assert!(common::rel_err(*a, *b) <= 1e-9);
        }
        prop_assert!(common::rel_err(parallel_closed_form(&p).unwrap(), sched.parallel) <= 1e-9);
    }

    #[test]
    fn bounds_sandwich(seed in any::<u64>()) {
        let p = common::random_params(&mut ChaCha8Rng::seed_from_u64(seed), 64);
        let t = parallel_closed_form(&p).unwrap();
        let tol = 1e-9 * t;
        prop_assert!(lower_bound(&p).unwrap().composite <= t + tol);
        prop_assert!(t <= upper_bound(&p).unwrap() + tol);
        let realized = t_serial(&p).unwrap() / t;
        prop_assert!(realized <= speedup_upper_bound(&p).unwrap() * (1.0 + 1e-9));
    }

    #[test]
    fn uniform_regimes_are_exact(seed in any::<u64>()) {
        let p = common::random_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        let u = UniformParams::from_params(&p).unwrap();
        prop_assert_eq!(uniform_latency(&u).parallel, parallel_schedule(&p).unwrap().parallel);
    }

    #[test]
    fn faster_generation_never_hurts(seed in any::<u64>(), factor in 1.0f64..10.0) {
        let p = common::random_params(&mut ChaCha8Rng::seed_from_u64(seed), 16);
        let mut fast = p.clone();
        fast.v_gen *= factor;
        let (slow_t, fast_t) = (parallel_closed_form(&p).unwrap(), parallel_closed_form(&fast).unwrap());
        prop_assert!(fast_t <= slow_t * (1.0 + 1e-12));
    }

    #[test]
    fn parallel_beats_serial_within_overhead(seed in any::<u64>()) {
        let p = common::random_params(&mut ChaCha8Rng::seed_from_u64(seed), 64);
        let gap = parallel_closed_form(&p).unwrap() - t_serial(&p).unwrap();
        prop_assert!(gap <= overhead_bound(&p).unwrap() + 1e-9 * t_serial(&p).unwrap());
    }
}
