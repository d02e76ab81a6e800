//! Trajectory containers, the line-delimited JSON file format, expert
//! filtering, returns, and state normalization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{check_dim, ClueError, Result};
use crate::numerics::Matrix;

/// Smallest standard deviation used when normalizing a state dimension.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Option<f64>,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub success: Option<bool>,
    /// Rewards the trajectory carried before relabeling, kept for ablations.
    pub original_rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, success: Option<bool>) -> Self {
        Self {
            transitions,
            success,
            original_rewards: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.transitions.iter().all(|t| t.reward.is_some())
    }

    /// Undiscounted sum of rewards, `None` when unlabeled.
    pub fn ret(&self) -> Option<f64> {
        self.transitions
            .iter()
            .map(|t| t.reward)
            .sum::<Option<f64>>()
    }

    /// Explicit success flag if present, otherwise goal-reached semantics:
    /// any transition with positive reward.
    pub fn is_success(&self) -> Option<bool> {
        self.success.or_else(|| {
            self.is_labeled().then(|| {
                self.transitions
                    .iter()
                    .any(|t| t.reward.unwrap_or(0.0) > 0.0)
            })
        })
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.transitions.last().map(|t| t.next_state.as_slice())
    }
}

/// Per-dimension state normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    action_dim: usize,
    /// Whether the file form carries the `original_rewards` field.
    relabeled: bool,
}

impl Dataset {
    /// Validates and wraps a set of trajectories.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .and_then(|t| t.transitions.first())
            .ok_or_else(|| ClueError::Validation("dataset has no transitions".into()))?;
        let state_dim = first.state.len();
        let action_dim = first.action.len();
        let labeled = first.reward.is_some();
        let relabeled = trajectories.iter().any(|t| t.original_rewards.is_some());
        for (i, traj) in trajectories.iter().enumerate() {
            validate_trajectory(i, traj, state_dim, action_dim, labeled)?;
        }
        Ok(Self {
            trajectories,
            state_dim,
            action_dim,
            relabeled,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.trajectories[0].transitions[0].reward.is_some()
    }

    pub fn is_relabeled(&self) -> bool {
        self.relabeled
    }

    pub(crate) fn mark_relabeled(&mut self) {
        self.relabeled = true;
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Same trajectories with every reward removed.
    pub fn without_rewards(&self) -> Dataset {
        let mut out = self.clone();
        for traj in &mut out.trajectories {
            traj.transitions.iter_mut().for_each(|t| t.reward = None);
        }
        out
    }

    /// Concatenates datasets with matching dimensions.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let trajs = parts
            .iter()
            .flat_map(|d| d.trajectories.iter().cloned())
            .collect();
        Dataset::new(trajs)
    }

    /// Keeps the first `ceil(fraction · len)` trajectories.
    pub fn take_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ClueError::InvalidArgument(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len());
        Dataset::new(self.trajectories[..n].to_vec())
    }

    /// Column view of every transition, in dataset order.
    pub fn table(&self) -> TransitionTable {
        let n = self.num_transitions();
        let mut states = Vec::with_capacity(n * self.state_dim);
        let mut actions = Vec::with_capacity(n * self.action_dim);
        let mut next_states = Vec::with_capacity(n * self.state_dim);
        let mut rewards = Vec::with_capacity(n);
        let mut terminals = Vec::with_capacity(n);
        for t in self.transitions() {
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next_states.extend_from_slice(&t.next_state);
            rewards.push(t.reward.unwrap_or(0.0));
            terminals.push(t.terminal);
        }
        TransitionTable {
            states: Matrix::new(n, self.state_dim, states).expect("validated"),
            actions: Matrix::new(n, self.action_dim, actions).expect("validated"),
            next_states: Matrix::new(n, self.state_dim, next_states).expect("validated"),
            rewards,
            terminals,
        }
    }

    pub fn state_stats(&self) -> NormStats {
        let rows: Vec<&[f64]> = self.transitions().map(|t| t.state.as_slice()).collect();
        let m = Matrix::from_rows(&rows).expect("validated");
        let (mean, std) = m.column_mean_std();
        NormStats {
            mean,
            std: std.into_iter().map(|s| s.max(STD_FLOOR)).collect(),
        }
    }

    /// Applies `f` to every state and next state.
    pub fn map_states(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Dataset {
        let mut out = self.clone();
        for t in out
            .trajectories
            .iter_mut()
            .flat_map(|t| t.transitions.iter_mut())
        {
            t.state = f(&t.state);
            t.next_state = f(&t.next_state);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Self::from_reader(File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(BufWriter::new(File::create(path)?))
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Dataset> {
        let mut trajs = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| ClueError::Parse {
                    location: format!("line {}, column {}", i + 1, e.column()),
                    message: e.to_string(),
                })?;
            trajs.push(rec.into_trajectory(i + 1)?);
        }
        Dataset::new(trajs)
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        for traj in &self.trajectories {
            let rec = TrajectoryRecord::from_trajectory(traj, self.relabeled);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Flat per-transition columns used by the learners.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub states: Matrix,
    pub actions: Matrix,
    pub next_states: Matrix,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl TransitionTable {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn validate_trajectory(
    i: usize,
    traj: &Trajectory,
    sd: usize,
    ad: usize,
    labeled: bool,
) -> Result<()> {
    let bad = |msg: String| ClueError::Validation(format!("trajectory {i}: {msg}"));
    if traj.transitions.is_empty() {
        return Err(bad("empty trajectory".into()));
    }
    let last = traj.transitions.len() - 1;
    for (t, tr) in traj.transitions.iter().enumerate() {
        check_dim("state", sd, tr.state.len()).map_err(|e| bad(e.to_string()))?;
        check_dim("next_state", sd, tr.next_state.len()).map_err(|e| bad(e.to_string()))?;
        check_dim("action", ad, tr.action.len()).map_err(|e| bad(e.to_string()))?;
        if tr.reward.is_some() != labeled {
            return Err(bad(
                "reward labels must be present for all trajectories or none".into(),
            ));
        }
        if tr.terminal && t != last {
            return Err(bad(format!(
                "terminal flag at step {t} before the final step"
            )));
        }
        let finite = tr
            .state
            .iter()
            .chain(&tr.action)
            .chain(&tr.next_state)
            .chain(tr.reward.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(bad(format!("non-finite value at step {t}")));
        }
        if t < last && tr.next_state != traj.transitions[t + 1].state {
            return Err(bad(format!(
                "next_state of step {t} differs from state of step {}",
                t + 1
            )));
        }
    }
    if let Some(orig) = &traj.original_rewards {
        if orig.len() != traj.transitions.len() {
            return Err(bad(
                "original_rewards length differs from action count".into()
            ));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Option<Vec<f64>>,
    terminals: Vec<bool>,
    success: Option<bool>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "present_or_null"
    )]
    original_rewards: Option<Option<Vec<f64>>>,
}

/// Distinguishes a missing field (`None`) from an explicit `null` (`Some(None)`).
fn present_or_null<'de, D>(de: D) -> std::result::Result<Option<Option<Vec<f64>>>, D::Error>
where
    D: Deserializer<'de>,
{
    Option::<Vec<f64>>::deserialize(de).map(Some)
}

impl TrajectoryRecord {
    fn from_trajectory(traj: &Trajectory, relabeled: bool) -> Self {
        let mut observations: Vec<Vec<f64>> =
            traj.transitions.iter().map(|t| t.state.clone()).collect();
        if let Some(last) = traj.transitions.last() {
            observations.push(last.next_state.clone());
        }
        Self {
            observations,
            actions: traj.transitions.iter().map(|t| t.action.clone()).collect(),
            rewards: traj.transitions.iter().map(|t| t.reward).collect(),
            terminals: traj.transitions.iter().map(|t| t.terminal).collect(),
            success: traj.success,
            original_rewards: relabeled.then(|| traj.original_rewards.clone()),
        }
    }

    fn into_trajectory(self, line: usize) -> Result<Trajectory> {
        let n = self.actions.len();
        let err = |msg: String| ClueError::Validation(format!("line {line}: {msg}"));
        if self.observations.len() != n + 1 {
            return Err(err(format!(
                "{} observations for {n} actions (need actions + 1)",
                self.observations.len()
            )));
        }
        if self.terminals.len() != n {
            return Err(err(format!(
                "{} terminals for {n} actions",
                self.terminals.len()
            )));
        }
        if let Some(r) = &self.rewards {
            if r.len() != n {
                return Err(err(format!("{} rewards for {n} actions", r.len())));
            }
        }
        let transitions = (0..n)
            .map(|t| Transition {
                state: self.observations[t].clone(),
                action: self.actions[t].clone(),
                reward: self.rewards.as_ref().map(|r| r[t]),
                next_state: self.observations[t + 1].clone(),
                terminal: self.terminals[t],
            })
            .collect();
        Ok(Trajectory {
            transitions,
            success: self.success,
            original_rewards: self.original_rewards.flatten(),
        })
    }
}

/// Splits `d` into the `k` best successful trajectories and everything else.
///
/// Successes are ranked by return (unlabeled trajectories rank as 0) with ties
/// broken by dataset order. Fewer than `k` successes yields all of them.
pub fn filter_expert_by_success(d: &Dataset, k: usize) -> Result<(Dataset, Dataset)> {
    if k == 0 {
        return Err(ClueError::InvalidArgument("k must be at least 1".into()));
    }
    let mut successes = Vec::new();
    for (i, traj) in d.trajectories.iter().enumerate() {
        match traj.is_success() {
            Some(true) => successes.push((i, traj.ret().unwrap_or(0.0))),
            Some(false) => {}
            None => return Err(ClueError::MissingRewards),
        }
    }
    if successes.is_empty() {
        return Err(ClueError::NoExpertFound);
    }
    // Stable sort keeps earlier indices first among equal returns.
    successes.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut chosen: Vec<usize> = successes.iter().take(k).map(|&(i, _)| i).collect();
    chosen.sort_unstable();
    let mut expert = Vec::new();
    let mut rest = Vec::new();
    for (i, traj) in d.trajectories.iter().enumerate() {
        if chosen.binary_search(&i).is_ok() {
            expert.push(traj.clone());
        } else {
            rest.push(traj.clone());
        }
    }
    let rest = if rest.is_empty() {
        // Keep the type total: an all-expert input leaves an empty remainder.
        Dataset {
            trajectories: rest,
            state_dim: d.state_dim,
            action_dim: d.action_dim,
            relabeled: d.relabeled,
        }
    } else {
        Dataset::new(rest)?
    };
    Ok((Dataset::new(expert)?, rest))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnStats {
    pub returns: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn compute_returns(d: &Dataset) -> Result<ReturnStats> {
    let returns = d
        .trajectories
        .iter()
        .map(Trajectory::ret)
        .collect::<Option<Vec<f64>>>()
        .ok_or(ClueError::MissingRewards)?;
    let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ReturnStats { returns, min, max })
}

/// Z-scores every state dimension. Constant dimensions get the `STD_FLOOR`.
pub fn normalize_states(d: &Dataset) -> Result<(Dataset, NormStats)> {
    if d.num_transitions() < 2 {
        return Err(ClueError::InvalidArgument(
            "normalization needs at least two transitions".into(),
        ));
    }
    let stats = d.state_stats();
    for (i, s) in stats.std.iter().enumerate() {
        if *s <= STD_FLOOR {
            log::warn!("state dimension {i} is constant; std floored at {STD_FLOOR}");
        }
    }
    Ok((d.map_states(|s| stats.normalize(s)), stats))
}
