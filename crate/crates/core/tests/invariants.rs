use critgen_core::diffusion::{self, make_schedule};
use critgen_core::dynamics::{self, ActionTrajectory, VehicleAction, VehicleState};
use critgen_core::metrics::{self, MetricsConfig, PropertyHistogram, PropertySamples};
use critgen_core::simulate::{self, ConstantPlanner, SimConfig, SimLog};
use proptest::prelude::*;

fn actions(max_len: usize) -> impl Strategy<Value = ActionTrajectory> {
    prop::collection::vec((-4.0f64..4.0, -1.0f64..1.0), 1..max_len)
        .prop_map(|v| ActionTrajectory::new(v.into_iter().map(|(a, w)| VehicleAction::new(a, w)).collect(), 0.1).unwrap())
}

fn state() -> impl Strategy<Value = VehicleState> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.0f64..15.0, -3.0f64..3.0).prop_map(|(x, y, v, t)| VehicleState::new(x, y, v, t))
}

fn histogram(bins: usize) -> impl Strategy<Value = PropertyHistogram> {
    prop::collection::vec(0.01f64..1.0, bins).prop_map(move |raw| {
        let s: f64 = raw.iter().sum();
        PropertyHistogram::from_mass(metrics::uniform_edges(0.0, 8.0, bins), raw.iter().map(|m| m / s).collect()).unwrap()
    })
}

/// A short closed-loop battery whose logs feed the metric invariants.
fn battery_logs() -> Vec<SimLog> {
    let cfg = SimConfig {
        steps: 30,
        ..Default::default()
    };
    let planner = ConstantPlanner { horizon: 20 };
    simulate::run_battery(&simulate::scenario_battery(6, 4), &[0, 1], &planner, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollout_translation_equivariant(s0 in state(), tau in actions(30), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let a = dynamics::rollout(&s0, &tau).unwrap();
        let shifted = VehicleState::new(s0.x + dx, s0.y + dy, s0.v, s0.theta);
        let b = dynamics::rollout(&shifted, &tau).unwrap();
        for (p, q) in a.states.iter().zip(&b.states) {
            prop_assert!((q.x - p.x - dx).abs() < 1e-9);
            prop_assert!((q.y - p.y - dy).abs() < 1e-9);
            prop_assert_eq!(p.v.to_bits(), q.v.to_bits());
            prop_assert_eq!(p.theta.to_bits(), q.theta.to_bits());
        }
    }

    #[test]
    fn rollout_replays_stepwise(s0 in state(), tau in actions(30)) {
        let traj = dynamics::rollout(&s0, &tau).unwrap();
        prop_assert_eq!(traj.states.len(), tau.len() + 1);
        for (t, a) in tau.actions.iter().enumerate() {
            prop_assert_eq!(dynamics::step(&traj.states[t], a, tau.dt).unwrap(), traj.states[t + 1]);
        }
    }

    #[test]
    fn q_sample_mixes_signal_and_noise(x0 in prop::collection::vec(-3.0f64..3.0, 2..40), k in 1usize..=50) {
        let sched = make_schedule(50, 1e-4, 0.1).unwrap();
        let zeros = vec![0.0; x0.len()];
        let clean = diffusion::q_sample(&x0, k, &zeros, &sched).unwrap();
        let noise = diffusion::q_sample(&zeros, k, &x0, &sched).unwrap();
        let ab = sched.alpha_bar(k);
        for i in 0..x0.len() {
            prop_assert!((clean[i] - ab.sqrt() * x0[i]).abs() < 1e-12);
            prop_assert!((noise[i] - (1.0 - ab).sqrt() * x0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_is_a_metric(a in histogram(16), b in histogram(16), c in histogram(16)) {
        let w = |x: &PropertyHistogram, y: &PropertyHistogram| metrics::wasserstein_1d(x, y).unwrap();
        prop_assert!(w(&a, &a) <= 1e-12);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() <= 1e-12);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-12);
        prop_assert!(w(&a, &b) >= 0.0);
    }

    #[test]
    fn realism_deviation_of_self_is_zero(tau in actions(40), s0 in state()) {
        let traj = dynamics::rollout(&s0, &tau).unwrap();
        let samples = PropertySamples::from_states([traj.states.as_slice()], 0.1);
        prop_assume!(!samples.jerk.is_empty());
        let rd = metrics::realism_deviation(&samples, &samples, &MetricsConfig::default()).unwrap();
        prop_assert_eq!(rd.rd, 0.0);
    }
}

#[test]
fn metric_aggregates_ignore_episode_order() {
    let logs = battery_logs();
    let cfg = MetricsConfig::default();
    let cr = metrics::collision_rate(&logs).unwrap();
    let ir = metrics::route_incompletion(&logs, false).unwrap();
    let mut reversed = logs.clone();
    reversed.reverse();
    let mut rotated = logs.clone();
    rotated.rotate_left(5);
    for other in [&reversed, &rotated] {
        assert!((metrics::collision_rate(other).unwrap() - cr).abs() < 1e-15);
        assert!((metrics::route_incompletion(other, false).unwrap() - ir).abs() < 1e-12);
        assert!(
            (metrics::speed_satisfaction(other, cfg.desired_speed).unwrap()
                - metrics::speed_satisfaction(&logs, cfg.desired_speed).unwrap())
            .abs()
                < 1e-12
        );
    }
    let own = PropertySamples::from_logs(&logs);
    let report = metrics::evaluate(&logs, &own, &cfg).unwrap();
    assert_eq!(report.rd, 0.0);
    assert_eq!(report.episodes, logs.len());
}

#[test]
fn speed_satisfaction_is_one_exactly_at_desired_speed() {
    let mut logs = battery_logs();
    let ss = metrics::speed_satisfaction(&logs, 8.0).unwrap();
    assert!(ss < 1.0);
    for log in &mut logs {
        for step in &mut log.steps {
            for s in &mut step.states {
                s.v = 8.0;
            }
        }
    }
    assert_eq!(metrics::speed_satisfaction(&logs, 8.0).unwrap(), 1.0);
    logs[0].steps[3].states[1].v = 8.0 + 1e-9;
    assert!(metrics::speed_satisfaction(&logs, 8.0).unwrap() < 1.0);
}
