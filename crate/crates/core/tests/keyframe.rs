mod common;

use common::{oracle_keyframes, random_trajectory};
use proptest::prelude::*;
use rosa::common::derive_stream;
use rosa::keyframe::{extract, KeyframeConfig, TrajectoryPoint};

#[test]
fn matches_the_pseudocode_on_random_trajectories() {
    let mut rng = derive_stream(2024, 0).rng();
    let cfg = KeyframeConfig::default();
    for t in 0..300 {
        let traj = random_trajectory(&mut rng);
        let got = extract(&traj, &cfg).unwrap();
        assert_eq!(got, oracle_keyframes(&traj, cfg.epsilon, cfg.window), "trajectory {t}");
    }
}

#[test]
fn three_frame_pause_matches_the_pseudocode() {
    let mut traj: Vec<TrajectoryPoint> = (0..10)
        .map(|i| TrajectoryPoint {
            position: [0.01 * i as f64, 0.1, 0.2],
            gripper: rosa::common::Gripper::Open,
        })
        .collect();
    for i in 4..7 {
        traj[i].position = traj[4].position;
    }
    for i in 7..10 {
        traj[i].position[0] = traj[4].position[0] + 0.01 * (i - 6) as f64;
    }
    let cfg = KeyframeConfig::default();
    assert_eq!(extract(&traj, &cfg).unwrap(), oracle_keyframes(&traj, cfg.epsilon, cfg.window));
}

fn trajectory(seed: u64) -> Vec<TrajectoryPoint> {
    random_trajectory(&mut derive_stream(seed, 1).rng())
}

proptest! {
    #[test]
    fn strictly_increasing_with_endpoints(seed in any::<u64>()) {
        let traj = trajectory(seed);
        let k = extract(&traj, &KeyframeConfig::default()).unwrap();
        prop_assert_eq!(k[0], 0);
        prop_assert_eq!(*k.last().unwrap(), traj.len() - 1);
        prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invariant_under_joint_rescaling(seed in any::<u64>(), c in prop_oneof![Just(0.5), Just(2.0), Just(4.0)]) {
        // powers of two keep the scaled distances exact
        let traj = trajectory(seed);
        let cfg = KeyframeConfig::default();
        let scaled: Vec<TrajectoryPoint> = traj
            .iter()
            .map(|p| TrajectoryPoint { position: p.position.map(|v| v * c), gripper: p.gripper })
            .collect();
        let scfg = KeyframeConfig { epsilon: cfg.epsilon * c, ..cfg };
        prop_assert_eq!(extract(&traj, &cfg).unwrap(), extract(&scaled, &scfg).unwrap());
    }

    #[test]
    fn appending_a_still_frame_keeps_earlier_picks(seed in any::<u64>()) {
        let traj = trajectory(seed);
        let cfg = KeyframeConfig::default();
        let before = extract(&traj, &cfg).unwrap();
        let mut longer = traj.clone();
        longer.push(*traj.last().unwrap());
        let after = extract(&longer, &cfg).unwrap();
        for i in before.iter().filter(|&&i| i + 1 < traj.len()) {
            prop_assert!(after.contains(i), "{} dropped: {:?} -> {:?}", i, before, after);
        }
    }
}
