//! Unsupervised skill discovery: k-means over transitions, one expert set per
//! cluster, and one relabel-then-IQL pipeline per expert set.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cvae::{self, CvaeConfig, CvaeModel};
use crate::dataset::{Dataset, NormStats, Trajectory};
use crate::envs::{EvalSummary, PointMaze};
use crate::error::{ClueError, Result};
use crate::numerics::{squared_distance, Matrix};
use crate::offline_rl::{IqlAgent, IqlConfig};
use crate::parallel::{map_range, map_slice};
use crate::pipeline::{self, RewardConfig};
use crate::reward::RewardLabeler;
use crate::rng::{derive, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            n_init: 1,
        }
    }
}

/// Result of one k-means fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the kept run.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        self.assignments.iter().for_each(|&c| sizes[c] += 1);
        sizes
    }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = squared_distance(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each new centre is drawn with probability proportional
/// to the squared distance from the closest centre chosen so far.
fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut Rng) -> KMeans {
    let dim = points[0].len();
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let near = map_slice(points, |p| nearest(p, &centroids));
        let next: Vec<usize> = near.iter().map(|x| x.0).collect();
        let mut dists: Vec<f64> = near.iter().map(|x| x.1).collect();
        history.push(dists.iter().sum());
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters restart at the point currently worst served.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                centroids[c] = points[far].clone();
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    KMeans {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of `n_init` restarts by final
/// inertia (earliest restart wins ties).
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    config: &KMeansConfig,
    rng: &mut Rng,
) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(ClueError::InvalidArgument(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
    {
        return Err(ClueError::InvalidArgument(
            "k-means points must be finite and equally sized".into(),
        ));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..config.n_init.max(1) {
        let run = lloyd(points, k, config.max_iter, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Clustering of a dataset's transitions in z-scored `(s, a, s')` space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub feature_stats: NormStats,
    pub inertia: f64,
}

pub fn transition_features(d: &Dataset) -> Vec<Vec<f64>> {
    d.transitions()
        .map(|t| {
            t.state
                .iter()
                .chain(&t.action)
                .chain(&t.next_state)
                .copied()
                .collect()
        })
        .collect()
}

impl ClusterModel {
    pub fn fit(d: &Dataset, k: usize, config: &KMeansConfig, rng: &mut Rng) -> Result<Self> {
        let raw = transition_features(d);
        let (mean, std) = Matrix::from_rows(&raw)?.column_mean_std();
        let feature_stats = NormStats {
            mean,
            std: std.into_iter().map(|s| s.max(1e-6)).collect(),
        };
        let feats: Vec<Vec<f64>> = raw.iter().map(|f| feature_stats.normalize(f)).collect();
        let km = kmeans(&feats, k, config, rng)?;
        Ok(Self {
            k,
            centroids: km.centroids,
            assignments: km.assignments,
            feature_stats,
            inertia: km.inertia,
        })
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&c| sizes[c] += 1);
        sizes
    }
}

/// Transitions of cluster `cluster_id` as single-step trajectories, in dataset order.
pub fn cluster_to_expert(cm: &ClusterModel, d: &Dataset, cluster_id: usize) -> Result<Dataset> {
    if cm.assignments.len() != d.num_transitions() {
        return Err(ClueError::dims(
            "cluster assignments",
            d.num_transitions(),
            cm.assignments.len(),
        ));
    }
    let trajs: Vec<Trajectory> = d
        .transitions()
        .zip(&cm.assignments)
        .filter(|(_, &c)| c == cluster_id)
        .map(|(t, _)| Trajectory::new(vec![t.clone()], None))
        .collect();
    if trajs.is_empty() {
        return Err(ClueError::Validation(format!(
            "cluster {cluster_id} is empty"
        )));
    }
    Dataset::new(trajs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkillCvaeMode {
    /// One uncalibrated CVAE on all data, fine-tuned with calibration per cluster.
    #[default]
    Shared,
    /// An independent CVAE per cluster.
    PerCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillsConfig {
    pub k: usize,
    pub kmeans: KMeansConfig,
    pub cvae: CvaeConfig,
    pub reward: RewardConfig,
    pub iql: IqlConfig,
    pub mode: SkillCvaeMode,
    /// Calibrated fine-tuning iterations per cluster in shared mode.
    pub finetune_iterations: usize,
    /// Clusters holding less than this fraction of transitions are dropped.
    pub min_cluster_fraction: f64,
    pub eval_episodes: usize,
    /// Train clusters concurrently.
    pub parallel: bool,
}

impl Default for SkillsConfig {
    fn default() -> Self {
        Self {
            k: 8,
            kmeans: KMeansConfig::default(),
            cvae: CvaeConfig::desk(),
            reward: RewardConfig::default(),
            iql: IqlConfig::desk(),
            mode: SkillCvaeMode::Shared,
            finetune_iterations: 500,
            min_cluster_fraction: 0.005,
            eval_episodes: 10,
            parallel: false,
        }
    }
}

pub struct Skill {
    pub cluster_id: usize,
    pub size: usize,
    pub labeler: RewardLabeler,
    pub agent: IqlAgent,
    pub eval: Option<EvalSummary>,
}

pub struct SkillLibrary {
    pub clusters: ClusterModel,
    pub skills: Vec<Skill>,
    pub dropped: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

/// Index of the pre-training stream in shared mode (never a cluster id).
const SHARED_INDEX: u64 = u32::MAX as u64;

/// Clusters `d`, then learns one skill per retained cluster. Per-cluster
/// failures are recorded and the remaining clusters still run. With a single
/// retained cluster the per-cluster path is used, since sharing saves nothing.
pub fn learn_skills(
    d: &Dataset,
    config: &SkillsConfig,
    eval_env: Option<&PointMaze>,
    seed: u64,
) -> Result<SkillLibrary> {
    let unlabeled = d.without_rewards();
    let clusters = ClusterModel::fit(
        &unlabeled,
        config.k,
        &config.kmeans,
        &mut derive(seed, Stream::Kmeans, 0),
    )?;
    let sizes = clusters.cluster_sizes();
    let min_size = config.min_cluster_fraction * unlabeled.num_transitions() as f64;
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        (0..config.k).partition(|&c| sizes[c] > 0 && sizes[c] as f64 >= min_size);
    for &c in &dropped {
        log::warn!("dropping cluster {c} with {} transitions", sizes[c]);
    }
    let shared = if config.mode == SkillCvaeMode::Shared && kept.len() > 1 {
        Some(pretrain_shared(&unlabeled, &config.cvae, seed)?)
    } else {
        None
    };
    let run = |c: usize| -> Result<Skill> {
        let expert = cluster_to_expert(&clusters, &unlabeled, c)?;
        let labeler = match &shared {
            Some(base) => finetune(base, &expert, &unlabeled, config, seed, c as u64)?,
            None => {
                pipeline::fit_labeler(
                    &expert,
                    &unlabeled,
                    &config.cvae,
                    &config.reward,
                    seed,
                    c as u64,
                )?
                .0
            }
        };
        let relabeled = pipeline::relabel(&labeler, &unlabeled, seed, c as u64)?;
        let (agent, curves) = pipeline::train_agent(&relabeled, &config.iql, seed, c as u64, None)?;
        curves.into_result()?;
        let eval = eval_env.map(|env| {
            crate::envs::evaluate(
                env,
                &agent,
                config.eval_episodes,
                &mut derive(seed, Stream::Eval, c as u64),
            )
        });
        Ok(Skill {
            cluster_id: c,
            size: sizes[c],
            labeler,
            agent,
            eval,
        })
    };
    let results: Vec<Result<Skill>> = if config.parallel {
        map_slice(&kept, |&c| run(c))
    } else {
        kept.iter().map(|&c| run(c)).collect()
    };
    let mut skills = Vec::new();
    let mut failures = Vec::new();
    for (c, r) in kept.iter().zip(results) {
        match r {
            Ok(s) => skills.push(s),
            Err(e) => {
                log::warn!("skill {c} failed: {e}");
                failures.push((*c, e.to_string()));
            }
        }
    }
    Ok(SkillLibrary {
        clusters,
        skills,
        dropped,
        failures,
    })
}

fn pretrain_shared(d: &Dataset, cvae_cfg: &CvaeConfig, seed: u64) -> Result<CvaeModel> {
    let mut rng = derive(seed, Stream::Cvae, SHARED_INDEX);
    let cfg = CvaeConfig {
        calibration_weight: 0.0,
        ..cvae_cfg.clone()
    };
    let mut model = CvaeModel::new(
        d.state_dim(),
        d.action_dim(),
        &cfg,
        d.state_stats(),
        &mut rng,
    )?;
    cvae::train(&mut model, d, d, &cfg, &mut rng)?.into_result()?;
    Ok(model)
}

fn finetune(
    base: &CvaeModel,
    expert: &Dataset,
    rest: &Dataset,
    config: &SkillsConfig,
    seed: u64,
    c: u64,
) -> Result<RewardLabeler> {
    let mut rng = derive(seed, Stream::Cvae, c);
    let cfg = CvaeConfig {
        iterations: config.finetune_iterations,
        ..config.cvae.clone()
    };
    let mixed = pipeline::mixed_pool(expert, rest, cfg.exclude_expert_from_elbo)?;
    let mut model = base.clone();
    cvae::train(&mut model, &mixed, expert, &cfg, &mut rng)?.into_result()?;
    RewardLabeler::from_expert(
        model,
        expert,
        config.reward.temperature,
        config.reward.sampling_mode,
    )
}

/// Mean Euclidean distance between final states of two skills' rollouts.
pub fn final_state_distance(a: &EvalSummary, b: &EvalSummary) -> f64 {
    let mut total = 0.0;
    for x in &a.episodes {
        for y in &b.episodes {
            total += crate::numerics::distance(&x.final_state, &y.final_state);
        }
    }
    total / (a.episodes.len() * b.episodes.len()).max(1) as f64
}

/// Most frequent quadrant of each skill's final states (lowest index on ties).
pub fn modal_quadrants(lib: &SkillLibrary, env: &PointMaze) -> Vec<(usize, usize)> {
    lib.skills
        .iter()
        .filter_map(|s| {
            let eval = s.eval.as_ref()?;
            let mut counts = [0usize; 4];
            eval.episodes
                .iter()
                .for_each(|e| counts[env.quadrant(&e.final_state)] += 1);
            let q = (0..4).fold(0, |b, q| if counts[q] > counts[b] { q } else { b });
            Some((s.cluster_id, q))
        })
        .collect()
}

#[derive(Serialize)]
struct AnchorFile<'a> {
    cluster_id: usize,
    size: usize,
    anchor: &'a [f64],
    temperature: f64,
    sampling_mode: crate::reward::SamplingMode,
}

impl SkillLibrary {
    /// Writes `clusters.json`, `diversity.csv`, and one directory per skill
    /// under `dir/skills/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("skills"))?;
        write_json(&dir.join("clusters.json"), &self.clusters)?;
        for s in &self.skills {
            let sd = dir.join("skills").join(s.cluster_id.to_string());
            fs::create_dir_all(&sd)?;
            s.labeler.model().save(
                sd.join("cvae.ckpt"),
                sd.join("cvae.json"),
                s.labeler.temperature(),
            )?;
            s.agent.save(sd.join("agent.ckpt"), sd.join("agent.json"))?;
            write_json(
                &sd.join("anchor.json"),
                &AnchorFile {
                    cluster_id: s.cluster_id,
                    size: s.size,
                    anchor: s.labeler.anchor(),
                    temperature: s.labeler.temperature(),
                    sampling_mode: s.labeler.mode(),
                },
            )?;
            if let Some(eval) = &s.eval {
                let mut w = BufWriter::new(File::create(sd.join("eval.csv"))?);
                writeln!(w, "episode,return,success,length,final_x,final_y")?;
                for (i, e) in eval.episodes.iter().enumerate() {
                    writeln!(
                        w,
                        "{i},{},{},{},{},{}",
                        e.ret, e.success, e.length, e.final_state[0], e.final_state[1]
                    )?;
                }
                let mut w = BufWriter::new(File::create(sd.join("trajectories.csv"))?);
                writeln!(w, "episode,t,x,y")?;
                for (i, e) in eval.episodes.iter().enumerate() {
                    for (t, p) in e.path.iter().enumerate() {
                        writeln!(w, "{i},{t},{},{}", p[0], p[1])?;
                    }
                }
            }
        }
        let mut w = BufWriter::new(File::create(dir.join("diversity.csv"))?);
        writeln!(w, "skill_a,skill_b,final_state_distance")?;
        let evaluated: Vec<(usize, &EvalSummary)> = self
            .skills
            .iter()
            .filter_map(|s| Some((s.cluster_id, s.eval.as_ref()?)))
            .collect();
        let rows = map_range(evaluated.len(), |i| {
            (i + 1..evaluated.len())
                .map(|j| (i, j, final_state_distance(evaluated[i].1, evaluated[j].1)))
                .collect::<Vec<_>>()
        });
        for (i, j, dist) in rows.into_iter().flatten() {
            writeln!(w, "{},{},{dist}", evaluated[i].0, evaluated[j].0)?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}
