mod common;

use clue::cvae::{self, calibration_loss, expert_spread, CvaeConfig, CvaeModel};
use clue::dataset::{
    compute_returns, filter_expert_by_success, normalize_states, Dataset, Trajectory, Transition,
};
use clue::envs::{evaluate, generate_mixture, BehaviorPolicy, PointMaze, UniformRandom};
use clue::offline_rl::{fit_reward_scaler, IqlConfig};
use clue::pipeline::{clue_imitation, fit_labeler, RewardConfig};
use clue::rng::{derive, seeded, Stream};
use clue::skills::{
    cluster_to_expert, learn_skills, ClusterModel, KMeansConfig, SkillCvaeMode, SkillsConfig,
};
use common::{line_trajectory, mean, toy, toy_cvae_config};
use rand::Rng as _;

fn medium_mixture(episodes: usize, seed: u64) -> Dataset {
    let env = PointMaze::builtin("medium").unwrap();
    let mix = [
        (BehaviorPolicy::NoisyExpert { eps: 0.1 }, 0.1),
        (BehaviorPolicy::random(), 0.9),
    ];
    generate_mixture(&env, &mix, episodes, &mut derive(seed, Stream::Data, 0)).unwrap()
}

fn expert_pairs(d: &Dataset) -> Vec<(Vec<f64>, Vec<f64>)> {
    d.transitions()
        .map(|t| (t.state.clone(), t.action.clone()))
        .collect()
}

#[test]
fn planted_successes_are_recovered() {
    let mut rng = seeded(5);
    let planted = [3usize, 11, 17, 29];
    let trajs: Vec<Trajectory> = (0..40)
        .map(|i| {
            let len = rng.random_range(2..8);
            let mut rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..0.0)).collect();
            let success = planted.contains(&i);
            if success {
                *rewards.last_mut().unwrap() = 1.0;
            }
            line_trajectory(&rewards, Some(success))
        })
        .collect();
    let d = Dataset::new(trajs.clone()).unwrap();
    let (expert, rest) = filter_expert_by_success(&d, planted.len()).unwrap();
    let want: Vec<Trajectory> = planted.iter().map(|&i| trajs[i].clone()).collect();
    assert_eq!(expert.trajectories(), want.as_slice());
    assert_eq!(rest.len(), 40 - planted.len());
}

#[test]
fn returns_match_independent_sums() {
    let d = medium_mixture(60, 2);
    let stats = compute_returns(&d).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (traj, r) in d.trajectories().iter().zip(&stats.returns) {
        let mut sum = 0.0;
        for t in &traj.transitions {
            sum += t.reward.unwrap();
        }
        assert_eq!(*r, sum);
        lo = lo.min(sum);
        hi = hi.max(sum);
    }
    assert_eq!((stats.min, stats.max), (lo, hi));
    assert_eq!(fit_reward_scaler(&d).unwrap().scale, 1000.0 / (hi - lo));
}

#[test]
fn thousand_transition_round_trip() {
    let d = medium_mixture(40, 3);
    assert!(d.num_transitions() >= 1000, "{}", d.num_transitions());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
}

#[test]
fn normalization_round_trips_generated_states() {
    let d = medium_mixture(20, 4);
    let (n, stats) = normalize_states(&d).unwrap();
    for (a, b) in n.transitions().zip(d.transitions()) {
        for (x, y) in stats.denormalize(&a.state).iter().zip(&b.state) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn generated_data_respects_walls_and_success_flags() {
    let env = PointMaze::builtin("medium").unwrap();
    let d = medium_mixture(80, 6);
    for traj in d.trajectories() {
        for t in &traj.transitions {
            assert!(env.is_free(&t.state) && env.is_free(&t.next_state));
        }
        let hit = traj.transitions.iter().any(|t| t.reward == Some(1.0));
        assert_eq!(traj.is_success(), Some(hit));
    }
    let labels: Vec<_> = d.trajectories().iter().map(|t| t.is_success()).collect();
    assert!(labels.contains(&Some(true)) && labels.contains(&Some(false)));
}

#[test]
fn dynamics_are_deterministic() {
    let env = PointMaze::builtin("large").unwrap();
    let mut rng = seeded(9);
    for _ in 0..200 {
        let s = env.sample_start(&mut rng);
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        assert_eq!(env.move_point(&s, &a), env.move_point(&s, &a));
    }
}

#[test]
fn random_policy_floor_on_medium() {
    let env = PointMaze::builtin("medium").unwrap();
    let summary = evaluate(&env, &UniformRandom, 100, &mut seeded(0));
    assert!(summary.success_rate < 0.2, "{}", summary.success_rate);
}

#[test]
fn cvae_loss_decreases_on_two_modes() {
    let mut rng = seeded(1);
    let trajs: Vec<Trajectory> = (0..40)
        .map(|i| {
            let a = if i % 2 == 0 { [0.7, 0.0] } else { [-0.7, 0.0] };
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let t = Transition {
                state: s.to_vec(),
                action: a.to_vec(),
                reward: None,
                next_state: vec![s[0] + 0.1 * a[0], s[1]],
                terminal: false,
            };
            Trajectory::new(vec![t], None)
        })
        .collect();
    let d = Dataset::new(trajs).unwrap();
    let cfg = CvaeConfig {
        iterations: 500,
        calibration_weight: 0.0,
        ..CvaeConfig::desk()
    };
    let mut m = CvaeModel::new(2, 2, &cfg, d.state_stats(), &mut seeded(2)).unwrap();
    let report = cvae::train(&mut m, &d, &d, &cfg, &mut seeded(3)).unwrap();
    let head = mean(&report.elbo_loss[..50]);
    let tail = mean(&report.elbo_loss[report.elbo_loss.len() - 50..]);
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

/// Expert calibration loss and spread after training on the toy data.
fn toy_embedding_stats(config: &CvaeConfig, seed: u64) -> (f64, f64) {
    let mut rng = derive(11, Stream::Data, 0);
    let expert = toy(20, true, &mut rng);
    let rest = toy(200, false, &mut rng);
    let (labeler, report) =
        fit_labeler(&expert, &rest, config, &RewardConfig::default(), seed, 0).unwrap();
    let calibr = calibration_loss(labeler.model(), &expert_pairs(&expert)).unwrap();
    (calibr, report.expert_spread)
}

#[test]
fn calibration_shrinks_expert_spread() {
    for seed in 1..=3 {
        let (_, s0) = toy_embedding_stats(&toy_cvae_config(0.0), seed);
        let (_, s1) = toy_embedding_stats(&toy_cvae_config(0.1), seed);
        assert!(s1 < s0, "seed {seed}: {s1} vs {s0}");
    }
}

// With expert samples in the ELBO pool at share f, the KL term holds each
// expert σ² near f / (2λ + f), so the penalty can only vanish once the
// expert data is left out of the ELBO.
#[test]
fn calibration_penalty_collapses_without_expert_elbo() {
    let config = |lambda| CvaeConfig {
        exclude_expert_from_elbo: true,
        ..toy_cvae_config(lambda)
    };
    for seed in 1..=3 {
        let (c0, _) = toy_embedding_stats(&config(0.0), seed);
        let (c1, _) = toy_embedding_stats(&config(0.1), seed);
        assert!(c1 < 0.1 * c0, "seed {seed}: {c1} vs {c0}");
    }
}

#[test]
fn constant_expert_collapses() {
    let mut rng = derive(12, Stream::Data, 0);
    let rest = toy(100, false, &mut rng);
    let trajs: Vec<Trajectory> = toy(20, true, &mut rng)
        .trajectories()
        .iter()
        .map(|t| {
            let steps = t
                .transitions
                .iter()
                .map(|x| Transition {
                    action: vec![0.5, 0.5],
                    ..x.clone()
                })
                .collect();
            Trajectory::new(steps, None)
        })
        .collect();
    let expert = Dataset::new(trajs).unwrap();
    let (labeler, _) = fit_labeler(
        &expert,
        &rest,
        &toy_cvae_config(0.8),
        &RewardConfig::default(),
        1,
        0,
    )
    .unwrap();
    let std = cvae::expert_mean_std(labeler.model(), &expert).unwrap();
    assert!(std.iter().all(|s| *s < 0.05), "{std:?}");
    assert!(expert_spread(labeler.model(), &expert).unwrap().is_finite());
}

#[test]
fn calibrated_toy_rewards_favor_experts() {
    let mut rng = derive(11, Stream::Data, 0);
    let expert = toy(20, true, &mut rng);
    let held_out = toy(20, true, &mut rng);
    let rest = toy(200, false, &mut rng);
    let unlabeled = Dataset::concat(&[&expert, &rest]).unwrap();
    let run = clue_imitation(
        &unlabeled,
        &expert,
        &toy_cvae_config(0.8),
        &RewardConfig::default(),
        1,
    )
    .unwrap();
    let mut r = derive(1, Stream::Reward, 1);
    let on_expert = run.labeler.rewards(&expert, &mut r).unwrap();
    let on_held = run.labeler.rewards(&held_out, &mut r).unwrap();
    let on_rest = run.labeler.rewards(&rest, &mut r).unwrap();
    assert!(mean(&on_expert) >= 0.9, "{}", mean(&on_expert));
    assert!(mean(&on_held) > mean(&on_rest));
    // Relabeling keeps everything but the rewards.
    for (a, b) in run.relabeled.transitions().zip(unlabeled.transitions()) {
        assert_eq!(
            (&a.state, &a.action, &a.next_state, a.terminal),
            (&b.state, &b.action, &b.next_state, b.terminal)
        );
    }
}

fn two_blob_dataset() -> (Dataset, Vec<usize>) {
    let mut rng = seeded(21);
    let mut plants = Vec::new();
    let trajs = (0..60)
        .map(|i| {
            let c = i % 2;
            plants.push(c);
            let centre = if c == 0 { -3.0 } else { 3.0 };
            let s = vec![
                centre + rng.random_range(-0.3..0.3),
                centre + rng.random_range(-0.3..0.3),
            ];
            let a = vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let t = Transition {
                next_state: vec![s[0] + 0.1 * a[0], s[1] + 0.1 * a[1]],
                state: s,
                action: a,
                reward: None,
                terminal: false,
            };
            Trajectory::new(vec![t], None)
        })
        .collect();
    (Dataset::new(trajs).unwrap(), plants)
}

#[test]
fn planted_blobs_become_cluster_experts() {
    let (d, plants) = two_blob_dataset();
    let cm = ClusterModel::fit(&d, 2, &KMeansConfig::default(), &mut seeded(0)).unwrap();
    let mut seen = 0;
    for c in 0..2 {
        let expert = cluster_to_expert(&cm, &d, c).unwrap();
        let plant = plants[cm.assignments.iter().position(|&x| x == c).unwrap()];
        let want: Vec<&Transition> = d
            .transitions()
            .zip(&plants)
            .filter(|(_, &p)| p == plant)
            .map(|(t, _)| t)
            .collect();
        let got: Vec<&Transition> = expert.transitions().collect();
        assert_eq!(got, want);
        seen += got.len();
    }
    assert_eq!(seen, d.num_transitions());
}

#[test]
fn single_skill_matches_imitation_pipeline() {
    let d = medium_mixture(12, 8).without_rewards();
    let cvae = CvaeConfig {
        iterations: 200,
        ..CvaeConfig::desk()
    };
    let config = SkillsConfig {
        k: 1,
        cvae: cvae.clone(),
        iql: IqlConfig {
            steps: 5,
            ..IqlConfig::desk()
        },
        mode: SkillCvaeMode::Shared,
        ..SkillsConfig::default()
    };
    let lib = learn_skills(&d, &config, None, 4).unwrap();
    let mut a = derive(0, Stream::Reward, 0);
    let from_skill = lib.skills[0].labeler.rewards(&d, &mut a).unwrap();
    let run = clue_imitation(&d, &d, &cvae, &RewardConfig::default(), 4).unwrap();
    let from_il = run.labeler.rewards(&d, &mut a).unwrap();
    assert_eq!(from_skill, from_il);
}
