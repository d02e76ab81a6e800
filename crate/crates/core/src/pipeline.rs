//! End-to-end compositions shared by the CLI, the skill learner, and the
//! experiment harnesses. Every stage draws from its own derived RNG stream, so
//! a pipeline is a pure function of its inputs, config, and seed.

use serde::{Deserialize, Serialize};

use crate::cvae::{self, CvaeConfig, CvaeModel, CvaeTrainReport};
use crate::dataset::{filter_expert_by_success, Dataset};
use crate::envs::{evaluate_protocol, EvalSummary, PointMaze};
use crate::error::Result;
use crate::offline_rl::{self, Evaluator, IqlAgent, IqlConfig, TrainCurves};
use crate::reward::{RewardLabeler, SamplingMode, DEFAULT_TEMPERATURE};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub temperature: f64,
    pub sampling_mode: SamplingMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            sampling_mode: SamplingMode::Mean,
        }
    }
}

/// ELBO training pool: the expert data together with the unlabeled data,
/// unless the expert part is excluded.
pub fn mixed_pool(expert: &Dataset, rest: &Dataset, exclude_expert: bool) -> Result<Dataset> {
    if exclude_expert || expert.is_empty() {
        Ok(rest.without_rewards())
    } else if rest.is_empty() {
        Ok(expert.without_rewards())
    } else {
        Dataset::concat(&[&expert.without_rewards(), &rest.without_rewards()])
    }
}

/// Trains a fresh CVAE on `expert ∪ rest` and anchors a labeler at the expert
/// embedding. Uses the `(seed, Cvae, index)` stream.
pub fn fit_labeler(
    expert: &Dataset,
    rest: &Dataset,
    cvae_cfg: &CvaeConfig,
    reward: &RewardConfig,
    seed: u64,
    index: u64,
) -> Result<(RewardLabeler, CvaeTrainReport)> {
    let mut rng = derive(seed, Stream::Cvae, index);
    let mixed = mixed_pool(expert, rest, cvae_cfg.exclude_expert_from_elbo)?;
    let mut model = CvaeModel::new(
        mixed.state_dim(),
        mixed.action_dim(),
        cvae_cfg,
        mixed.state_stats(),
        &mut rng,
    )?;
    let report = cvae::train(&mut model, &mixed, expert, cvae_cfg, &mut rng)?.into_result()?;
    let labeler =
        RewardLabeler::from_expert(model, expert, reward.temperature, reward.sampling_mode)?;
    Ok((labeler, report))
}

/// Relabels `d` with the `(seed, Reward, index)` stream.
pub fn relabel(labeler: &RewardLabeler, d: &Dataset, seed: u64, index: u64) -> Result<Dataset> {
    labeler.relabel(d, &mut derive(seed, Stream::Reward, index))
}

/// Builds and trains an IQL agent with the `(seed, Iql, index)` stream.
pub fn train_agent(
    d: &Dataset,
    iql: &IqlConfig,
    seed: u64,
    index: u64,
    evaluator: Option<Evaluator<'_>>,
) -> Result<(IqlAgent, TrainCurves)> {
    let mut rng = derive(seed, Stream::Iql, index);
    let mut agent = IqlAgent::for_dataset(d, iql.clone(), &mut rng)?;
    let curves = offline_rl::train(&mut agent, d, iql.steps, &mut rng, evaluator)?;
    Ok((agent, curves))
}

/// Mean success rate over the seeds × episodes protocol.
pub fn protocol_success(
    env: &PointMaze,
    agent: &IqlAgent,
    seeds: &[u64],
    episodes: usize,
) -> (f64, Vec<(u64, EvalSummary)>) {
    let rows = evaluate_protocol(env, agent, seeds, episodes);
    let mean = rows.iter().map(|(_, s)| s.success_rate).sum::<f64>() / rows.len().max(1) as f64;
    (mean, rows)
}

pub struct ClueRun {
    pub expert: Dataset,
    pub labeler: RewardLabeler,
    pub cvae_report: CvaeTrainReport,
    pub relabeled: Dataset,
}

/// Sparse-reward mode: the top-`k` successful trajectories become the expert
/// set, the rest train the CVAE alongside them, and the whole dataset is
/// relabeled.
pub fn clue_sparse(
    d: &Dataset,
    k: usize,
    cvae_cfg: &CvaeConfig,
    reward: &RewardConfig,
    seed: u64,
) -> Result<ClueRun> {
    let (expert, rest) = filter_expert_by_success(d, k)?;
    let (labeler, cvae_report) = fit_labeler(&expert, &rest, cvae_cfg, reward, seed, 0)?;
    let relabeled = relabel(&labeler, d, seed, 0)?;
    Ok(ClueRun {
        expert,
        labeler,
        cvae_report,
        relabeled,
    })
}

/// Imitation mode: external expert data, reward-free behavior data.
pub fn clue_imitation(
    unlabeled: &Dataset,
    expert: &Dataset,
    cvae_cfg: &CvaeConfig,
    reward: &RewardConfig,
    seed: u64,
) -> Result<ClueRun> {
    let (labeler, cvae_report) = fit_labeler(expert, unlabeled, cvae_cfg, reward, seed, 0)?;
    let relabeled = relabel(&labeler, unlabeled, seed, 0)?;
    Ok(ClueRun {
        expert: expert.clone(),
        labeler,
        cvae_report,
        relabeled,
    })
}
