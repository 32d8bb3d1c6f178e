use causalq::cmdp::{
    estimate_nominal, exact_nominal, sample_interventional, sample_observational, Cmdp, Regime, Trajectory,
};
use causalq::envs::{make_confounded_gridworld, make_random_cmdp, DEFAULT_WIND};
use causalq::solvers::{
    causal_bound_vi, greedy_policy, policy_value, BoundSide, Policy, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use causalq::Error;

fn lower_bound(nominal: &causalq::NominalModel) -> causalq::QTable {
    causal_bound_vi(nominal, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS)
        .unwrap()
        .0
}

#[test]
fn estimated_bounds_approach_exact_bounds_with_more_data() {
    let cmdp = make_random_cmdp(4, 3, 4, 0.8, 11, 0.8).unwrap();
    let exact = lower_bound(&exact_nominal(&cmdp));
    let distance = |horizon: usize| {
        let data = vec![sample_observational(&cmdp, horizon, 5)];
        lower_bound(&estimate_nominal(&data, cmdp.info()).unwrap()).sup_distance(&exact)
    };
    let (small, large) = (distance(2_000), distance(400_000));
    assert!(large < small, "{small} -> {large}");
    assert!(large < 0.05, "distance {large}");
}

#[test]
fn trajectory_files_round_trip_into_estimation() {
    let cmdp = make_random_cmdp(3, 2, 3, 0.5, 2, 1.0).unwrap();
    let traj = sample_observational(&cmdp, 500, 8);
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let back = Trajectory::read_csv(buf.as_slice(), Regime::Observational).unwrap();
    assert_eq!(back, traj);
    assert_eq!(
        estimate_nominal(&[back], cmdp.info()).unwrap(),
        estimate_nominal(&[traj], cmdp.info()).unwrap()
    );

    let interventional = sample_interventional(&cmdp, &Policy::uniform(3, 2), 50, 1);
    assert!(matches!(
        estimate_nominal(&[interventional], cmdp.info()),
        Err(Error::RegimeMismatch)
    ));
}

#[test]
fn environment_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inst = make_confounded_gridworld(4, 3, &DEFAULT_WIND, 6).unwrap();
    let path = dir.path().join("grid.toml");
    inst.cmdp.save(&path).unwrap();
    let loaded = Cmdp::load(&path).unwrap();
    assert_eq!(loaded, inst.cmdp);
    assert_eq!(exact_nominal(&loaded), exact_nominal(&inst.cmdp));
}

#[test]
fn causal_policy_never_loses_to_its_own_bound() {
    for seed in 0..20 {
        let cmdp = make_random_cmdp(5, 3, 4, 0.9, seed, 1.0).unwrap();
        let q = lower_bound(&exact_nominal(&cmdp));
        let bound: f64 = q.state_values().iter().zip(&cmdp.init_dist).map(|(v, p)| v * p).sum();
        let achieved = policy_value(&cmdp, &greedy_policy(&q), DEFAULT_TOL).unwrap();
        assert!(achieved >= bound - 1e-8, "seed {seed}: {achieved} < {bound}");
    }
}
