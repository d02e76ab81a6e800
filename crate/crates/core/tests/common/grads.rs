//! Analytic-vs-finite-difference checks of every trained loss at a seeded point.

use clue::cvae::{CvaeConfig, CvaeModel};
use clue::dataset::NormStats;
use clue::numerics::{central_difference, grad_check, relative_error, Mlp};
use clue::offline_rl::{Batch, IqlAgent, IqlConfig};
use clue::rng::{derive, normal, Rng, Stream};
use rand::Rng as _;

pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: u64 = 10;

fn uniform(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn norm() -> NormStats {
    NormStats {
        mean: vec![0.2, -0.1],
        std: vec![0.7, 1.3],
    }
}

type Pairs = Vec<(Vec<f64>, Vec<f64>)>;

fn cvae_point(seed: u64, lambda: f64) -> (CvaeModel, Pairs, Vec<Vec<Vec<f64>>>, Pairs) {
    let mut rng = derive(seed, Stream::Init, 0);
    let cfg = CvaeConfig {
        latent_dim: 3,
        hidden: 8,
        hidden_layers: 2,
        calibration_weight: lambda,
        elbo_samples: 2,
        decoder_std: 0.5,
        ..CvaeConfig::default()
    };
    let m = CvaeModel::new(2, 2, &cfg, norm(), &mut rng).unwrap();
    let mixed: Pairs = (0..6)
        .map(|_| (uniform(2, &mut rng), uniform(2, &mut rng)))
        .collect();
    let eps = (0..mixed.len())
        .map(|_| {
            (0..2)
                .map(|_| (0..3).map(|_| normal(&mut rng)).collect())
                .collect()
        })
        .collect();
    let expert: Pairs = (0..4)
        .map(|_| (uniform(2, &mut rng), uniform(2, &mut rng)))
        .collect();
    (m, mixed, eps, expert)
}

/// Negative ELBO with fixed noise, encoder and decoder.
pub fn elbo_error(seed: u64) -> f64 {
    let (m, mixed, eps, _) = cvae_point(seed, 0.0);
    let ev = m.objective_and_grad(&mixed, &eps, &[]).unwrap();
    let loss = |m: &CvaeModel| m.objective_and_grad(&mixed, &eps, &[]).unwrap().total;
    let enc = grad_check(m.encoder(), &ev.encoder_grad, TOLERANCE, |net: &Mlp| {
        let mut probe = m.clone();
        *probe.encoder_mut() = net.clone();
        loss(&probe)
    });
    let dec = grad_check(m.decoder(), &ev.decoder_grad, TOLERANCE, |net: &Mlp| {
        let mut probe = m.clone();
        *probe.decoder_mut() = net.clone();
        loss(&probe)
    });
    enc.max_relative_error.max(dec.max_relative_error)
}

/// Calibration penalty: its share of the encoder gradient is the difference of
/// the objective gradients with and without the expert batch.
pub fn calibration_error(seed: u64) -> f64 {
    let lambda = 0.8;
    let (m, mixed, eps, expert) = cvae_point(seed, lambda);
    let with = m.objective_and_grad(&mixed, &eps, &expert).unwrap();
    let without = m.objective_and_grad(&mixed, &eps, &[]).unwrap();
    let analytic: Vec<f64> = with
        .encoder_grad
        .iter()
        .zip(&without.encoder_grad)
        .map(|(a, b)| a - b)
        .collect();
    let report = grad_check(m.encoder(), &analytic, TOLERANCE, |net: &Mlp| {
        let mut probe = m.clone();
        *probe.encoder_mut() = net.clone();
        lambda * clue::cvae::calibration_loss(&probe, &expert).unwrap()
    });
    report.max_relative_error
}

fn iql_point(seed: u64) -> (IqlAgent, Batch) {
    let mut rng = derive(seed, Stream::Init, 1);
    let cfg = IqlConfig {
        hidden: 8,
        awr_temperature: 2.0,
        ..IqlConfig::desk()
    };
    let mut agent = IqlAgent::new(2, 2, cfg, norm(), &mut rng).unwrap();
    for l in agent.log_std_mut() {
        *l = rng.random_range(-1.0..0.5);
    }
    let n = 12;
    let b = Batch {
        states: (0..n).map(|_| uniform(2, &mut rng)).collect(),
        actions: (0..n)
            .map(|_| uniform(2, &mut rng).iter().map(|a| 0.9 * a).collect())
            .collect(),
        rewards: uniform(n, &mut rng),
        next_states: (0..n).map(|_| uniform(2, &mut rng)).collect(),
        terminals: (0..n).map(|i| i % 5 == 0).collect(),
    };
    (agent, b)
}

/// Expectile regression of the value network.
pub fn expectile_error(seed: u64) -> f64 {
    let (agent, b) = iql_point(seed);
    let (_, g) = agent.value_objective(&b).unwrap();
    grad_check(agent.value_net(), &g, TOLERANCE, |net: &Mlp| {
        let mut probe = agent.clone();
        *probe.value_net_mut() = net.clone();
        probe.value_objective(&b).unwrap().0
    })
    .max_relative_error
}

/// Advantage-weighted regression, policy network and log-std.
pub fn awr_error(seed: u64) -> f64 {
    let (agent, b) = iql_point(seed);
    let (_, g_policy, g_log_std) = agent.policy_objective(&b, None).unwrap();
    let net = grad_check(agent.policy_net(), &g_policy, TOLERANCE, |net: &Mlp| {
        let mut probe = agent.clone();
        *probe.policy_net_mut() = net.clone();
        probe.policy_objective(&b, None).unwrap().0
    });
    let numeric = central_difference(agent.log_std(), 1e-5, |ls| {
        let mut probe = agent.clone();
        probe.log_std_mut().copy_from_slice(ls);
        probe.policy_objective(&b, None).unwrap().0
    });
    let log_std = g_log_std
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    net.max_relative_error.max(log_std)
}

type Check = (&'static str, fn(u64) -> f64);

/// Worst error over the seeded points for each loss, in a fixed order.
pub fn all_losses() -> Vec<(&'static str, f64)> {
    let checks: [Check; 4] = [
        ("elbo", elbo_error),
        ("calibration", calibration_error),
        ("expectile", expectile_error),
        ("awr", awr_error),
    ];
    checks
        .iter()
        .map(|(name, f)| (*name, (0..POINTS).map(f).fold(0.0, f64::max)))
        .collect()
}
