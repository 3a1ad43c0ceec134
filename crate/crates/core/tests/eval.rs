use rosa::collect::{collect_states, ExpertConfig, SceneType, StateCollectConfig};
use rosa::common::{derive_stream, ActionState};
use rosa::eval::{
    episode_stream, fit_ridge, format_pm, mean_std, probe_features, rollout, success_rate, EvalConfig, ExpertPolicy,
    Policy, PolicyInput, ProbeConfig,
};
use rosa::sim::{default_tasks, SimConfig};
use rosa::Result;

use rand::Rng;

/// Never moves.
struct Frozen;

impl Policy for Frozen {
    fn act(&self, input: &PolicyInput) -> Result<ActionState> {
        Ok(input.scene.robot)
    }
}

fn small_eval() -> EvalConfig {
    EvalConfig {
        episodes_per_task: 4,
        repeats: 2,
        ..Default::default()
    }
}

#[test]
fn stub_policies_hit_the_extremes() {
    let sim = SimConfig::default();
    let tasks = default_tasks();
    let all = success_rate(&ExpertPolicy(ExpertConfig::default()), &tasks, &sim, &small_eval()).unwrap();
    assert_eq!((all.mean, all.std), (1.0, 0.0));
    assert_eq!(format_pm(all.mean, all.std), "100.0 ± 0.0");
    let none = success_rate(&Frozen, &tasks, &sim, &small_eval()).unwrap();
    assert_eq!((none.mean, none.std), (0.0, 0.0));
    assert_eq!(none.successes, 0);
    assert_eq!(none.episodes, 2 * 4 * 2);
}

#[test]
fn success_rate_ignores_task_order() {
    let sim = SimConfig::default();
    let mut tasks = default_tasks();
    // succeeds only when the first object starts right of center
    struct Flaky;
    impl Policy for Flaky {
        fn act(&self, input: &PolicyInput) -> Result<ActionState> {
            if input.initial.objects[0].position[0] > 0.0 {
                ExpertPolicy(ExpertConfig::default()).act(input)
            } else {
                Ok(input.scene.robot)
            }
        }
    }
    let a = success_rate(&Flaky, &tasks, &sim, &small_eval()).unwrap();
    tasks.reverse();
    let b = success_rate(&Flaky, &tasks, &sim, &small_eval()).unwrap();
    for t in &a.tasks {
        assert_eq!(Some(t), b.task(&t.task));
    }
    assert!((a.mean - b.mean).abs() < 1e-12);
}

#[test]
fn rollouts_are_reproducible_and_bounded() {
    let sim = SimConfig::default();
    let task = &default_tasks()[0];
    let cfg = EvalConfig::default();
    let s = episode_stream(cfg.seed, &task.name, 0, 3);
    let a = rollout(&Frozen, task, &sim, s, &cfg);
    assert_eq!(a, rollout(&Frozen, task, &sim, s, &cfg));
    assert_eq!(a.keyframes, cfg.max_keyframes);
    assert!(!a.success);
    let e = rollout(&ExpertPolicy(ExpertConfig::default()), task, &sim, s, &cfg);
    assert!(e.success && e.keyframes <= cfg.max_keyframes);
}

#[test]
fn mean_std_uses_the_sample_formula() {
    assert_eq!(mean_std(&[]), (0.0, 0.0));
    assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    let (m, s) = mean_std(&[0.6, 0.64, 0.67]);
    assert!((m - 0.636_666_666).abs() < 1e-8);
    // sqrt(((-.0367)^2 + .0033^2 + .0333^2) / 2)
    assert!((s - 0.035_118_845).abs() < 1e-8);
    assert_eq!(format_pm(m, s), "63.7 ± 3.5");
}

fn random_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = derive_stream(seed, 0).rng();
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn oracle_features_probe_perfectly() {
    let sim = SimConfig::default();
    let samples = collect_states(
        SceneType::Relevant,
        &default_tasks(),
        4,
        20,
        &sim,
        &StateCollectConfig::default(),
        derive_stream(3, 3),
    )
    .unwrap();
    let targets: Vec<[f64; 7]> = samples.iter().map(|s| s.state.to_array()).collect();
    let features: Vec<Vec<f64>> = targets.iter().map(|t| t.to_vec()).collect();
    let r = probe_features(&features, &targets, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.mean_mse < 1e-6);
    assert_eq!(r.n_train + r.n_test, samples.len());
}

#[test]
fn closed_form_ridge_matches_gradient_descent() {
    let x = random_features(30, 4, 1);
    let mut rng = derive_stream(2, 0).rng();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|r| vec![r[0] - 2.0 * r[1] + 0.5 + rng.random_range(-0.1..0.1), r[2] * r[3]])
        .collect();
    let lambda = 0.1;
    let fit = fit_ridge(&x, &y, lambda).unwrap();

    // gradient descent on 0.5 * ||Xc W - Yc||^2 + 0.5 * lambda * ||W||^2 with the bias left free
    let (d, k) = (4, 2);
    let mut w = vec![vec![0.0; k]; d];
    let mut b = vec![0.0; k];
    for _ in 0..20000 {
        let mut gw = vec![vec![0.0; k]; d];
        let mut gb = vec![0.0; k];
        for (xi, yi) in x.iter().zip(&y) {
            for j in 0..k {
                let pred: f64 = (0..d).map(|a| xi[a] * w[a][j]).sum::<f64>() + b[j];
                let e = pred - yi[j];
                gb[j] += e;
                for a in 0..d {
                    gw[a][j] += e * xi[a];
                }
            }
        }
        let step = 0.01;
        for a in 0..d {
            for j in 0..k {
                w[a][j] -= step * (gw[a][j] + lambda * w[a][j]);
            }
        }
        for j in 0..k {
            b[j] -= step * gb[j];
        }
    }
    for a in 0..d {
        for j in 0..k {
            assert!((w[a][j] - fit.weights[(a, j)]).abs() < 1e-6, "w[{a}][{j}]");
        }
    }
    for j in 0..k {
        assert!((b[j] - fit.bias[j]).abs() < 1e-6, "b[{j}]");
    }
}

#[test]
fn probe_accuracy_survives_orthogonal_transforms() {
    let n = 200;
    let mut rng = derive_stream(9, 9).rng();
    let targets: Vec<[f64; 7]> = (0..n)
        .map(|_| std::array::from_fn(|i| if i < 3 { rng.random_range(-0.3..0.3) } else { 0.0 }))
        .collect();
    let noise = random_features(n, 3, 4);
    let features: Vec<Vec<f64>> = targets
        .iter()
        .zip(&noise)
        .map(|(t, z)| vec![t[0] + 0.01 * z[0], t[1] + 0.01 * z[1], t[2] + 0.01 * z[2], z[0], z[1]])
        .collect();
    // orthogonal matrix from a QR factorization of a random 5x5
    let m = nalgebra::DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let rotated: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (q.clone() * nalgebra::DVector::from_column_slice(f)).iter().copied().collect())
        .collect();
    let cfg = ProbeConfig::default();
    let a = probe_features(&features, &targets, &cfg).unwrap();
    let b = probe_features(&rotated, &targets, &cfg).unwrap();
    assert!((a.accuracy - b.accuracy).abs() <= 1e-3, "{} vs {}", a.accuracy, b.accuracy);
    assert!(a.accuracy > 0.5);
}

#[test]
fn degenerate_features_still_fit() {
    let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
    let y: Vec<Vec<f64>> = (0..10).map(|i| vec![3.0 * i as f64]).collect();
    let fit = fit_ridge(&x, &y, 1e-3).unwrap();
    let p = fit.predict(&[4.0, 8.0, 0.0]);
    assert!((p[0] - 12.0).abs() < 1e-3);
}
