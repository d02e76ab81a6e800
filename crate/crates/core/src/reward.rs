//! Intrinsic rewards from latent distance to the expert anchor.

use serde::{Deserialize, Serialize};

use crate::cvae::{reparameterize_with, CvaeModel};
use crate::dataset::Dataset;
use crate::error::{check_dim, ClueError, Result};
use crate::numerics::squared_distance;
use crate::parallel::map_range;
use crate::rng::{normal, Rng};

/// Temperature used when none is configured.
pub const DEFAULT_TEMPERATURE: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// `z(s, a)` is the posterior mean.
    #[default]
    Mean,
    /// `z(s, a)` is one reparameterized posterior sample.
    Sample,
}

impl std::str::FromStr for SamplingMode {
    type Err = ClueError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(SamplingMode::Mean),
            "sample" => Ok(SamplingMode::Sample),
            other => Err(ClueError::InvalidArgument(format!(
                "unknown sampling mode {other:?}"
            ))),
        }
    }
}

/// Expert anchor: mean posterior mean over every expert transition.
pub fn expert_anchor(m: &CvaeModel, expert: &Dataset) -> Result<Vec<f64>> {
    if expert.is_empty() || expert.num_transitions() == 0 {
        return Err(ClueError::InvalidArgument("expert dataset is empty".into()));
    }
    let means = crate::cvae::embed_means(m, expert)?;
    let mut anchor = vec![0.0; m.latent_dim()];
    for mu in &means {
        anchor.iter_mut().zip(mu).for_each(|(a, v)| *a += v);
    }
    let n = means.len() as f64;
    anchor.iter_mut().for_each(|a| *a /= n);
    Ok(anchor)
}

/// `exp(−c · ‖z − anchor‖²)`
pub fn reward_from_latent(z: &[f64], anchor: &[f64], temperature: f64) -> f64 {
    (-temperature * squared_distance(z, anchor)).exp()
}

/// Frozen encoder plus expert anchor.
#[derive(Debug, Clone)]
pub struct RewardLabeler {
    model: CvaeModel,
    anchor: Vec<f64>,
    temperature: f64,
    mode: SamplingMode,
}

impl RewardLabeler {
    pub fn new(
        model: CvaeModel,
        anchor: Vec<f64>,
        temperature: f64,
        mode: SamplingMode,
    ) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(ClueError::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        check_dim("anchor", model.latent_dim(), anchor.len())?;
        Ok(Self {
            model,
            anchor,
            temperature,
            mode,
        })
    }

    /// Builds a labeler whose anchor is computed from `expert`.
    pub fn from_expert(
        model: CvaeModel,
        expert: &Dataset,
        temperature: f64,
        mode: SamplingMode,
    ) -> Result<Self> {
        let anchor = expert_anchor(&model, expert)?;
        Self::new(model, anchor, temperature, mode)
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn model(&self) -> &CvaeModel {
        &self.model
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.anchor.clone(),
            temperature,
            self.mode,
        )
    }

    /// Squared latent distance to the anchor. `eps` is only read in sample mode.
    pub fn latent_distance(&self, s: &[f64], a: &[f64], eps: Option<&[f64]>) -> Result<f64> {
        let g = self.model.encode(s, a)?;
        let z = match (self.mode, eps) {
            (SamplingMode::Sample, Some(e)) => reparameterize_with(&g, e),
            (SamplingMode::Sample, None) => {
                return Err(ClueError::InvalidArgument(
                    "sample mode needs latent noise".into(),
                ))
            }
            (SamplingMode::Mean, _) => g.mean,
        };
        Ok(squared_distance(&z, &self.anchor))
    }

    /// `r̂(s, a) ∈ (0, 1]`. The generator is only consumed in sample mode.
    pub fn intrinsic_reward(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<f64> {
        let eps = self.draw_noise(rng);
        let d2 = self.latent_distance(s, a, eps.as_deref())?;
        Ok((-self.temperature * d2).exp())
    }

    fn draw_noise(&self, rng: &mut Rng) -> Option<Vec<f64>> {
        (self.mode == SamplingMode::Sample)
            .then(|| (0..self.model.latent_dim()).map(|_| normal(rng)).collect())
    }

    /// Rewards for every transition of `d`, in dataset order.
    pub fn rewards(&self, d: &Dataset, rng: &mut Rng) -> Result<Vec<f64>> {
        let pairs: Vec<(&[f64], &[f64])> = d
            .transitions()
            .map(|t| (t.state.as_slice(), t.action.as_slice()))
            .collect();
        // Noise is drawn up front so parallel labeling stays seed-deterministic.
        let noise: Vec<Option<Vec<f64>>> = pairs.iter().map(|_| self.draw_noise(rng)).collect();
        map_range(pairs.len(), |i| {
            self.latent_distance(pairs[i].0, pairs[i].1, noise[i].as_deref())
                .map(|d2| (-self.temperature * d2).exp())
        })
        .into_iter()
        .collect()
    }

    /// Replaces every reward of `d` with `r̂`. Pre-existing rewards move to the
    /// `original_rewards` side channel unless one is already populated.
    pub fn relabel(&self, d: &Dataset, rng: &mut Rng) -> Result<Dataset> {
        check_dim("relabel state_dim", self.model.state_dim(), d.state_dim())?;
        check_dim(
            "relabel action_dim",
            self.model.action_dim(),
            d.action_dim(),
        )?;
        let rewards = self.rewards(d, rng)?;
        let mut next = rewards.into_iter();
        let mut trajs = d.trajectories().to_vec();
        for traj in &mut trajs {
            if traj.original_rewards.is_none() && traj.is_labeled() {
                traj.original_rewards =
                    Some(traj.transitions.iter().map(|t| t.reward.unwrap()).collect());
            }
            for t in &mut traj.transitions {
                t.reward = next.next();
            }
        }
        let mut out = Dataset::new(trajs)?;
        out.mark_relabeled();
        Ok(out)
    }
}

/// Pearson correlation of two equally long series; `None` if either is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Equal-width histogram of values in `[0, 1]`: `(bin_lo, bin_hi, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 / bins as f64, (i + 1) as f64 / bins as f64, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::CvaeConfig;
    use crate::dataset::{NormStats, Trajectory, Transition};
    use crate::rng::seeded;

    /// Model whose posterior mean is the action itself (2-D state, 2-D action).
    fn identity_encoder() -> CvaeModel {
        let cfg = CvaeConfig {
            latent_dim: 2,
            hidden: 4,
            hidden_layers: 0,
            ..CvaeConfig::default()
        };
        let m = CvaeModel::new(2, 2, &cfg, NormStats::identity(2), &mut seeded(0)).unwrap();
        let mut enc = m.encoder().clone();
        let p = enc.params_mut();
        p.iter_mut().for_each(|v| *v = 0.0);
        // Output rows 0 and 1 read inputs 2 and 3 (the action).
        p[2] = 1.0;
        p[4 + 3] = 1.0;
        CvaeModel::from_parts(enc, m.decoder().clone(), 2, NormStats::identity(2), 0.1).unwrap()
    }

    fn one_step(s: [f64; 2], a: [f64; 2]) -> Trajectory {
        Trajectory::new(
            vec![Transition {
                state: s.to_vec(),
                action: a.to_vec(),
                reward: Some(0.0),
                next_state: s.to_vec(),
                terminal: false,
            }],
            None,
        )
    }

    #[test]
    fn anchor_is_mean_of_means() {
        let m = identity_encoder();
        let single = Dataset::new(vec![one_step([0.0, 0.0], [0.3, -0.4])]).unwrap();
        assert_eq!(expert_anchor(&m, &single).unwrap(), vec![0.3, -0.4]);
        let pair = Dataset::new(vec![
            one_step([0.0, 0.0], [1.0, 0.0]),
            one_step([5.0, 1.0], [-1.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(expert_anchor(&m, &pair).unwrap(), vec![0.0, 0.0]);
        let dup = Dataset::concat(&[&pair, &pair]).unwrap();
        assert_eq!(
            expert_anchor(&m, &dup).unwrap(),
            expert_anchor(&m, &pair).unwrap()
        );
    }

    #[test]
    fn reward_closed_forms() {
        let c = 3.0;
        let l =
            RewardLabeler::new(identity_encoder(), vec![0.0, 0.0], c, SamplingMode::Mean).unwrap();
        let mut rng = seeded(0);
        assert_eq!(
            l.intrinsic_reward(&[0.0, 0.0], &[0.0, 0.0], &mut rng)
                .unwrap(),
            1.0
        );
        let r = (std::f64::consts::LN_2 / c).sqrt();
        let half = l
            .intrinsic_reward(&[0.0, 0.0], &[r, 0.0], &mut rng)
            .unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_labelers_rejected() {
        assert!(
            RewardLabeler::new(identity_encoder(), vec![0.0, 0.0], 0.0, SamplingMode::Mean)
                .is_err()
        );
        assert!(
            RewardLabeler::new(identity_encoder(), vec![0.0], 1.0, SamplingMode::Mean).is_err()
        );
    }

    #[test]
    fn relabel_is_idempotent_and_preserves_structure() {
        let l = RewardLabeler::new(identity_encoder(), vec![0.2, 0.1], 2.0, SamplingMode::Mean)
            .unwrap();
        let d = Dataset::new(vec![
            one_step([0.0, 1.0], [0.5, 0.5]),
            one_step([2.0, 1.0], [-0.5, 0.25]),
        ])
        .unwrap();
        let once = l.relabel(&d, &mut seeded(1)).unwrap();
        let twice = l.relabel(&once, &mut seeded(2)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.num_transitions(), d.num_transitions());
        for (a, b) in once.transitions().zip(d.transitions()) {
            assert_eq!(
                (&a.state, &a.action, &a.next_state, a.terminal),
                (&b.state, &b.action, &b.next_state, b.terminal)
            );
        }
        assert_eq!(once.trajectories()[0].original_rewards, Some(vec![0.0]));
    }

    #[test]
    fn sample_mode_uses_noise() {
        let l = RewardLabeler::new(
            identity_encoder(),
            vec![0.0, 0.0],
            1.0,
            SamplingMode::Sample,
        )
        .unwrap();
        assert!(l.latent_distance(&[0.0, 0.0], &[0.0, 0.0], None).is_err());
        let a = l
            .intrinsic_reward(&[0.0, 0.0], &[0.0, 0.0], &mut seeded(1))
            .unwrap();
        let b = l
            .intrinsic_reward(&[0.0, 0.0], &[0.0, 0.0], &mut seeded(1))
            .unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        let h = histogram(&[0.0, 0.05, 0.5, 1.0], 10);
        assert_eq!(h[0].2, 2);
        assert_eq!(h[5].2, 1);
        assert_eq!(h[9].2, 1);
    }
}
