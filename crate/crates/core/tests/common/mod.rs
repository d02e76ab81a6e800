#![allow(dead_code)]

pub mod cli;
pub mod grads;

use clue::cvae::CvaeConfig;
use clue::dataset::{Dataset, Trajectory, Transition};
use clue::rng::Rng;
use rand::Rng as _;

pub const TOY_LEN: usize = 10;

/// Action of the toy expert: unit-speed-ish step straight toward the origin.
pub fn toy_expert_action(s: &[f64]) -> Vec<f64> {
    let n = (s[0] * s[0] + s[1] * s[1]).sqrt().max(1e-9);
    vec![-0.8 * s[0] / n, -0.8 * s[1] / n]
}

/// Synthetic 2-D point data. Experts head for the origin; non-experts draw
/// uniform actions that never point toward it, so the two are separable.
pub fn toy(n: usize, expert: bool, rng: &mut Rng) -> Dataset {
    let trajectories = (0..n)
        .map(|_| {
            let mut s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let transitions = (0..TOY_LEN)
                .map(|_| {
                    let a = if expert {
                        toy_expert_action(&s)
                    } else {
                        let e = toy_expert_action(&s);
                        loop {
                            let a: Vec<f64> =
                                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                            if a[0] * e[0] + a[1] * e[1] <= 0.0 {
                                break a;
                            }
                        }
                    };
                    let next = vec![s[0] + 0.1 * a[0], s[1] + 0.1 * a[1]];
                    let t = Transition {
                        state: s.clone(),
                        action: a,
                        reward: None,
                        next_state: next.clone(),
                        terminal: false,
                    };
                    s = next;
                    t
                })
                .collect();
            Trajectory::new(transitions, None)
        })
        .collect();
    Dataset::new(trajectories).unwrap()
}

/// Desk CVAE with a wider decoder, where the calibration weight has a visible
/// effect on small data.
pub fn toy_cvae_config(lambda: f64) -> CvaeConfig {
    CvaeConfig {
        calibration_weight: lambda,
        decoder_std: 0.5,
        ..CvaeConfig::desk()
    }
}

/// Probability that a random positive outscores a random negative (ties count half).
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ranks with ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// `1 − 6Σd² / (n(n² − 1))` over rank differences; exactly 1 for identical rankings.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let d2: f64 = ranks(x)
        .iter()
        .zip(ranks(y))
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// A trajectory of `len` unit steps along x with the given per-step rewards.
pub fn line_trajectory(rewards: &[f64], success: Option<bool>) -> Trajectory {
    let n = rewards.len();
    let transitions = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| Transition {
            state: vec![i as f64, 0.0],
            action: vec![1.0, 0.0],
            reward: Some(r),
            next_state: vec![i as f64 + 1.0, 0.0],
            terminal: success == Some(true) && i + 1 == n,
        })
        .collect();
    Trajectory::new(transitions, success)
}
