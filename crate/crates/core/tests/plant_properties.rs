use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tendon_leg::plant::{
    self, joint_torques, mechanical_energy, tendon_forces, ActivationVector, PlantParams,
    PlantState,
};

fn passive_params(dt: f64) -> PlantParams {
    let mut p = PlantParams::default();
    p.joint_damping = [0.0; 2];
    p.joint_friction = [0.0; 2];
    p.joint_min = [-10.0, -10.0];
    p.joint_max = [10.0, 10.0];
    p.dt_phys = dt;
    p
}

fn energy_drift(dt: f64) -> f64 {
    let p = passive_params(dt);
    let s0 = PlantState::at_rest([0.9, -0.6], &p);
    let e0 = mechanical_energy(&s0, &p);
    let n = (10.0 / dt).round() as usize;
    let mut s = s0;
    for _ in 0..n {
        s = plant::step(&s, &ActivationVector::ZERO, &p).unwrap();
    }
    // Relative to the swing's energy scale (energy above the hanging rest state).
    let rest = mechanical_energy(&PlantState::at_rest([0.0, 0.0], &p), &p);
    (mechanical_energy(&s, &p) - e0).abs() / (e0 - rest)
}

#[test]
fn passive_swing_conserves_energy() {
    let drift = energy_drift(1e-3);
    assert!(drift < 1e-3, "relative drift {drift}");
}

#[test]
fn energy_drift_converges_at_fourth_order() {
    let coarse = energy_drift(4e-3);
    let fine = energy_drift(2e-3);
    assert!(
        coarse / fine >= 8.0,
        "halving dt reduced drift only {}x ({coarse} -> {fine})",
        coarse / fine
    );
}

#[test]
fn random_activation_rollout_respects_joint_limits() {
    let p = PlantParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = PlantState::at_rest(p.joint_center(), &p);
    let mut worst: f64 = 0.0;
    let mut a = ActivationVector::ZERO;
    for tick in 0..6000 {
        if tick % 20 == 0 {
            a = ActivationVector::clamped([rng.gen(), rng.gen(), rng.gen()]).unwrap();
        }
        for _ in 0..10 {
            s = plant::step(&s, &a, &p).unwrap();
            for i in 0..2 {
                worst = worst
                    .max(p.joint_min[i] - s.q[i])
                    .max(s.q[i] - p.joint_max[i]);
            }
        }
    }
    assert!(worst <= 0.05, "limit transgression {worst} rad");
}

#[test]
fn gantry_and_weighted_rollouts_stay_finite() {
    let center = PlantParams::default().joint_center();
    for p in [PlantParams::gantry(0.01, center), PlantParams::weighted(5.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = PlantState::at_rest(center, &p);
        let mut a = ActivationVector::ZERO;
        for tick in 0..2000 {
            if tick % 30 == 0 {
                a = ActivationVector::clamped([rng.gen(), rng.gen(), rng.gen()]).unwrap();
            }
            for _ in 0..10 {
                s = plant::step(&s, &a, &p).unwrap();
                let f = plant::ground_reaction(&s, &p);
                assert!(f[1] >= 0.0);
                if plant::foot_position(&s, &p)[1] > p.ground_height {
                    assert_eq!(f, [0.0, 0.0]);
                }
            }
        }
        assert!(s.is_finite());
    }
}

proptest! {
    #[test]
    fn tensions_are_non_negative(
        a in prop::array::uniform3(0.0f64..=1.0),
        q1 in -1.0f64..1.0, q2 in -1.5f64..0.3,
        w1 in -50.0f64..50.0, w2 in -50.0f64..50.0,
    ) {
        let p = PlantParams::default();
        let f = tendon_forces(&ActivationVector::clamped(a).unwrap(), &[q1, q2], &[w1, w2], &p).unwrap();
        for v in f {
            prop_assert!(v >= 0.0);
            prop_assert!(v <= 1.5 * 40.0);
        }
    }

    #[test]
    fn joint_torques_are_linear(
        f1 in prop::array::uniform3(0.0f64..100.0),
        f2 in prop::array::uniform3(0.0f64..100.0),
        alpha in 0.0f64..3.0, beta in 0.0f64..3.0,
    ) {
        let p = PlantParams::default();
        let mix = [0, 1, 2].map(|j| alpha * f1[j] + beta * f2[j]);
        let lhs = joint_torques(&mix, &p);
        let t1 = joint_torques(&f1, &p);
        let t2 = joint_torques(&f2, &p);
        for i in 0..2 {
            let rhs = alpha * t1[i] + beta * t2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
