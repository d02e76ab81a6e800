//! Command-line front end: config resolution, subcommands, and exit codes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cvae::{CvaeConfig, CvaeModel};
use crate::dataset::{filter_expert_by_success, Dataset};
use crate::envs::{
    evaluate_protocol, four_goal_dataset, generate_mixture, BehaviorPolicy, LayoutSpec, PointMaze,
};
use crate::error::ClueError;
use crate::offline_rl::{IqlAgent, IqlConfig, ScaleMode};
use crate::pipeline::{self, RewardConfig};
use crate::reward::{histogram, pearson, RewardLabeler, SamplingMode};
use crate::rng::{derive, Stream};
use crate::skills::{learn_skills, modal_quadrants, KMeansConfig, SkillCvaeMode, SkillsConfig};

/// Bad command-line usage (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Some skills failed while others succeeded (exit code 5).
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} skills failed")]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 0 success, 2 usage, 3 validation, 4 training diverged, 5 partial skill failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<PartialFailure>() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<ClueError>() {
            return match e {
                ClueError::TrainingDiverged(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    /// Sparse-reward relabeling from the best successful trajectories.
    #[default]
    Sparse,
    /// Offline imitation from external expert data.
    Il,
    Skills,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub episodes: usize,
    /// Comma-separated `policy:weight` pairs; policies are `expert`, `random`, `noisy:<eps>`, `diverse[:<eps>]`.
    pub mix: String,
    /// Extra expert-only episodes written to `expert.jsonl` (0 = none).
    pub expert_episodes: usize,
    pub dense_reward: bool,
    /// Reward-free four-corner data on the open arena for skill discovery.
    pub four_goal: bool,
    pub noise: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            episodes: 500,
            mix: "noisy:0.1:0.05,diverse:0.95".into(),
            expert_episodes: 0,
            dense_reward: false,
            four_goal: false,
            noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClueSection {
    /// Number of successful trajectories used as experts in sparse mode.
    pub top_k: usize,
    /// Leading fraction of the behavior dataset used.
    pub fraction: f64,
}

impl Default for ClueSection {
    fn default() -> Self {
        Self {
            top_k: 1,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillsSection {
    pub k: usize,
    pub mode: SkillCvaeMode,
    pub finetune_iterations: usize,
    pub min_cluster_fraction: f64,
    pub kmeans: KMeansConfig,
    pub eval_episodes: usize,
    pub parallel_skills: usize,
}

impl Default for SkillsSection {
    fn default() -> Self {
        let d = SkillsConfig::default();
        Self {
            k: d.k,
            mode: d.mode,
            finetune_iterations: d.finetune_iterations,
            min_cluster_fraction: d.min_cluster_fraction,
            kmeans: d.kmeans,
            eval_episodes: d.eval_episodes,
            parallel_skills: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: usize,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: 10,
            episodes: 10,
        }
    }
}

/// Fully resolved run configuration. Written as `config.json` beside every
/// command's outputs; feeding it back through `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    pub seed: Option<u64>,
    pub layout: String,
    pub data: Option<PathBuf>,
    pub expert: Option<PathBuf>,
    pub cvae_dir: Option<PathBuf>,
    pub agent_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub gen: GenSection,
    pub cvae: CvaeConfig,
    pub reward: RewardConfig,
    pub clue: ClueSection,
    pub iql: IqlConfig,
    pub skills: SkillsSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineKind::Sparse,
            seed: None,
            layout: "medium".into(),
            data: None,
            expert: None,
            cvae_dir: None,
            agent_dir: None,
            out: None,
            gen: GenSection::default(),
            cvae: CvaeConfig::desk(),
            reward: RewardConfig::default(),
            clue: ClueSection::default(),
            iql: IqlConfig::desk(),
            skills: SkillsSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    fn seed(&self) -> anyhow::Result<u64> {
        self.seed
            .ok_or_else(|| usage("a seed is required (--seed, the config file, or CLUE_SEED)"))
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| usage("an output directory is required (--out)"))
    }

    fn data(&self) -> anyhow::Result<&Path> {
        let p = self
            .data
            .as_deref()
            .ok_or_else(|| usage("a dataset is required (--data)"))?;
        require_exists(p)?;
        Ok(p)
    }

    fn env(&self) -> anyhow::Result<PointMaze> {
        let mut env = PointMaze::new(&LayoutSpec::resolve(&self.layout)?)?;
        env.dense_reward = self.gen.dense_reward;
        Ok(env)
    }

    fn skills_config(&self) -> SkillsConfig {
        SkillsConfig {
            k: self.skills.k,
            kmeans: self.skills.kmeans.clone(),
            cvae: self.cvae.clone(),
            reward: self.reward.clone(),
            iql: self.iql.clone(),
            mode: self.skills.mode,
            finetune_iterations: self.skills.finetune_iterations,
            min_cluster_fraction: self.skills.min_cluster_fraction,
            eval_episodes: self.skills.eval_episodes,
            parallel: self.skills.parallel_skills > 1,
        }
    }

    fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.seeds as u64).collect()
    }
}

fn require_exists(p: &Path) -> anyhow::Result<()> {
    if !p.exists() {
        return Err(ClueError::Validation(format!("{} does not exist", p.display())).into());
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "clue",
    version,
    about = "Calibrated latent rewards for offline RL on point mazes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out behavior policies and write datasets.
    GenData(GenDataArgs),
    /// Train a CVAE and save it with its expert anchor set.
    TrainCvae(RelabelArgs),
    /// Replace dataset rewards with intrinsic rewards.
    Relabel(RelabelArgs),
    /// Train an IQL agent on a labeled dataset.
    Train(TrainArgs),
    /// Evaluate a trained agent over seeds × episodes.
    Eval(EvalArgs),
    /// Cluster transitions and learn one skill per cluster.
    Skills(SkillsArgs),
    /// Grid over λ, data fraction, temperature, and seeds, against sparse IQL.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed (falls back to the config file, then CLUE_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Built-in layout name (umaze, medium, large, arena) or JSON layout path.
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Episodes to roll out.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// e.g. `expert:0.05,random:0.95` or `noisy:0.1:0.05,diverse:0.95`.
    #[arg(long)]
    pub mix: Option<String>,
    /// Also write this many scripted-expert episodes to `expert.jsonl`.
    #[arg(long)]
    pub expert_episodes: Option<usize>,
    /// Reward is minus the distance to the goal instead of sparse success.
    #[arg(long)]
    pub dense_reward: bool,
    /// Reward-free four-corner data for skill discovery (use with `--layout arena`).
    #[arg(long)]
    pub four_goal: bool,
}

#[derive(Debug, Args, Default)]
pub struct CvaeArgs {
    /// Calibration weight λ (0 disables calibration).
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// CVAE latent size.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// CVAE hidden width.
    #[arg(long)]
    pub cvae_hidden: Option<usize>,
    /// CVAE learning rate.
    #[arg(long)]
    pub cvae_lr: Option<f64>,
    /// CVAE training iterations.
    #[arg(long)]
    pub cvae_iterations: Option<usize>,
    /// Latent samples per datum in the reconstruction term.
    #[arg(long)]
    pub elbo_samples: Option<usize>,
    /// Fixed standard deviation of the decoder's action likelihood.
    #[arg(long)]
    pub decoder_std: Option<f64>,
    /// Leave expert data out of the ELBO pool.
    #[arg(long)]
    pub exclude_expert: bool,
    /// Reward temperature c in exp(−c‖z − z_e‖²).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Embed with the posterior mean or a sample.
    #[arg(long)]
    pub sampling: Option<SamplingMode>,
}

#[derive(Debug, Args)]
pub struct RelabelArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub cvae: CvaeArgs,
    /// Input dataset (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// External expert dataset (imitation mode); otherwise the top-k successes are used.
    #[arg(long)]
    pub expert: Option<PathBuf>,
    /// Number of best successful trajectories used as experts.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Directory of a previously trained CVAE (relabel only).
    #[arg(long)]
    pub cvae_dir: Option<PathBuf>,
    /// Use only this leading fraction of the dataset.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct IqlArgs {
    /// IQL gradient steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Expectile τ for the value function.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Advantage temperature β for policy extraction.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Discount factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Policy dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// IQL learning rate.
    #[arg(long)]
    pub iql_lr: Option<f64>,
    /// IQL batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Reward transform before training: none, return_range, or shift.
    #[arg(long)]
    pub reward_scaling: Option<ScaleMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub iql: IqlArgs,
    /// Input dataset (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only this leading fraction of the dataset.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding `agent.ckpt` and `agent.json`.
    #[arg(long)]
    pub agent: Option<PathBuf>,
    /// Number of evaluation seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Episodes per evaluation seed.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SkillsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub cvae: CvaeArgs,
    #[command(flatten)]
    pub iql: IqlArgs,
    /// Input dataset (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of clusters (skills).
    #[arg(long)]
    pub k: Option<usize>,
    /// `shared` (fine-tune one CVAE per cluster) or `per-cluster`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Worker threads for training clusters concurrently.
    #[arg(long)]
    pub parallel_skills: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub iql: IqlArgs,
    /// Input dataset (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// External expert dataset (imitation mode).
    #[arg(long)]
    pub expert: Option<PathBuf>,
    /// Grid of λ values: comma list or `lo..hi[:step]`.
    #[arg(long = "lambda", default_value = "0.8")]
    pub lambdas: String,
    /// Grid of dataset fractions.
    #[arg(long = "fraction", default_value = "1.0")]
    pub fractions: String,
    /// Grid of reward temperatures.
    #[arg(long = "temperature", default_value = "6")]
    pub temperatures: String,
    /// Training seeds, comma list.
    #[arg(long = "seeds", default_value = "1")]
    pub seeds: String,
    /// Number of best successful trajectories used as experts.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// CVAE training iterations.
    #[arg(long)]
    pub cvae_iterations: Option<usize>,
}

/// Parses `a,b,c` or `lo..hi[:step]` (default step 0.05).
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, s.parse::<f64>()?),
            None => (rest, 0.05),
        };
        let (lo, hi): (f64, f64) = (lo.parse()?, hi.parse()?);
        if !(step > 0.0) || hi < lo {
            return Err(usage(format!("bad range {spec:?}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad number {v:?} in {spec:?}")))
        })
        .collect()
}

fn parse_mix(spec: &str) -> anyhow::Result<Vec<(BehaviorPolicy, f64)>> {
    spec.split(',')
        .map(|part| {
            let (name, w) = part
                .trim()
                .rsplit_once(':')
                .ok_or_else(|| usage(format!("mixture entry {part:?} needs a weight")))?;
            let w: f64 = w
                .parse()
                .map_err(|_| usage(format!("bad mixture weight in {part:?}")))?;
            let policy = BehaviorPolicy::parse(name).map_err(|e| usage(e.to_string()))?;
            Ok((policy, w))
        })
        .collect()
}

fn base_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_exists(path)?;
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(ClueError::from)
                .with_context(|| format!("reading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if cfg.seed.is_none() {
        if let Ok(v) = std::env::var("CLUE_SEED") {
            cfg.seed = Some(
                v.trim()
                    .parse()
                    .map_err(|_| usage(format!("CLUE_SEED={v:?} is not an integer")))?,
            );
        }
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(l) = &common.layout {
        cfg.layout = l.clone();
    }
    Ok(cfg)
}

fn apply_cvae(cfg: &mut RunConfig, a: &CvaeArgs) {
    let c = &mut cfg.cvae;
    if let Some(v) = a.lambda {
        c.calibration_weight = v;
    }
    if let Some(v) = a.latent_dim {
        c.latent_dim = v;
    }
    if let Some(v) = a.cvae_hidden {
        c.hidden = v;
    }
    if let Some(v) = a.cvae_lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.cvae_iterations {
        c.iterations = v;
    }
    if let Some(v) = a.elbo_samples {
        c.elbo_samples = v;
    }
    if let Some(v) = a.decoder_std {
        c.decoder_std = v;
    }
    if a.exclude_expert {
        c.exclude_expert_from_elbo = true;
    }
    if let Some(v) = a.temperature {
        cfg.reward.temperature = v;
    }
    if let Some(v) = a.sampling {
        cfg.reward.sampling_mode = v;
    }
}

fn apply_iql(cfg: &mut RunConfig, a: &IqlArgs) {
    let c = &mut cfg.iql;
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.tau {
        c.expectile = v;
    }
    if let Some(v) = a.beta {
        c.awr_temperature = v;
    }
    if let Some(v) = a.gamma {
        c.discount = v;
    }
    if let Some(v) = a.dropout {
        c.dropout = v;
    }
    if let Some(v) = a.iql_lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.reward_scaling {
        c.reward_scaling = v;
    }
}

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = cfg.out()?.to_path_buf();
    fs::create_dir_all(&out)
        .map_err(ClueError::from)
        .with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(ClueError::from)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let d = Dataset::load(cfg.data()?)?;
    if cfg.clue.fraction < 1.0 {
        return Ok(d.take_fraction(cfg.clue.fraction)?);
    }
    Ok(d)
}

fn success_rate(d: &Dataset) -> f64 {
    let n = d
        .trajectories()
        .iter()
        .filter(|t| t.is_success() == Some(true))
        .count();
    n as f64 / d.len().max(1) as f64
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainCvae(a) => cmd_train_cvae(a),
        Command::Relabel(a) => cmd_relabel(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Skills(a) => cmd_skills(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.episodes {
        cfg.gen.episodes = v;
    }
    a.mix.iter().for_each(|v| cfg.gen.mix = v.clone());
    if let Some(v) = a.expert_episodes {
        cfg.gen.expert_episodes = v;
    }
    cfg.gen.dense_reward |= a.dense_reward;
    cfg.gen.four_goal |= a.four_goal;
    if cfg.gen.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let seed = cfg.seed()?;
    let env = cfg.env()?;
    let mix = parse_mix(&cfg.gen.mix)?;
    let out = prepare_out(&cfg)?;
    let mut rng = derive(seed, Stream::Data, 0);
    let d = if cfg.gen.four_goal {
        four_goal_dataset(&env, cfg.gen.episodes, cfg.gen.noise, &mut rng)?
    } else {
        generate_mixture(&env, &mix, cfg.gen.episodes, &mut rng)?
    };
    d.save(out.join("dataset.jsonl"))?;
    println!(
        "dataset: {} trajectories, {} transitions, success rate {:.3}",
        d.len(),
        d.num_transitions(),
        success_rate(&d)
    );
    if cfg.gen.expert_episodes > 0 {
        let e = generate_mixture(
            &env,
            &[(BehaviorPolicy::WaypointExpert, 1.0)],
            cfg.gen.expert_episodes,
            &mut derive(seed, Stream::Data, 1),
        )?;
        e.save(out.join("expert.jsonl"))?;
        println!(
            "expert: {} trajectories, success rate {:.3}",
            e.len(),
            success_rate(&e)
        );
    }
    Ok(())
}

fn relabel_config(a: &RelabelArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    apply_cvae(&mut cfg, &a.cvae);
    a.data.iter().for_each(|v| cfg.data = Some(v.clone()));
    a.expert.iter().for_each(|v| cfg.expert = Some(v.clone()));
    a.cvae_dir
        .iter()
        .for_each(|v| cfg.cvae_dir = Some(v.clone()));
    if let Some(v) = a.top_k {
        cfg.clue.top_k = v;
    }
    if let Some(v) = a.fraction {
        cfg.clue.fraction = v;
    }
    if cfg.expert.is_some() {
        cfg.pipeline = PipelineKind::Il;
    }
    if let Some(p) = &cfg.expert {
        require_exists(p)?;
    }
    if let Some(p) = &cfg.cvae_dir {
        require_exists(p)?;
    }
    Ok(cfg)
}

/// Expert set and unlabeled pool for the configured pipeline.
fn expert_and_rest(cfg: &RunConfig, d: &Dataset) -> anyhow::Result<(Dataset, Dataset)> {
    match &cfg.expert {
        Some(p) => Ok((Dataset::load(p)?, d.without_rewards())),
        None => Ok(filter_expert_by_success(d, cfg.clue.top_k)?),
    }
}

fn cmd_train_cvae(a: RelabelArgs) -> anyhow::Result<()> {
    let cfg = relabel_config(&a)?;
    let seed = cfg.seed()?;
    let d = load_data(&cfg)?;
    let out = prepare_out(&cfg)?;
    let (expert, rest) = expert_and_rest(&cfg, &d)?;
    let (labeler, report) = pipeline::fit_labeler(&expert, &rest, &cfg.cvae, &cfg.reward, seed, 0)?;
    labeler.model().save(
        out.join("cvae.ckpt"),
        out.join("cvae.json"),
        cfg.reward.temperature,
    )?;
    expert.save(out.join("expert.jsonl"))?;
    write_json(&out.join("anchor.json"), &labeler.anchor())?;
    let mut w = BufWriter::new(File::create(out.join("cvae_curve.csv")).map_err(ClueError::from)?);
    writeln!(w, "iteration,elbo_loss,kl,reconstruction,calibration")?;
    for i in 0..report.iterations() {
        writeln!(
            w,
            "{i},{},{},{},{}",
            report.elbo_loss[i], report.kl[i], report.reconstruction[i], report.calibration[i]
        )?;
    }
    println!(
        "cvae trained: final -elbo {:.4}, expert spread {:.4}",
        report.elbo_loss.last().copied().unwrap_or(f64::NAN),
        report.expert_spread
    );
    Ok(())
}

#[derive(Serialize)]
struct CorrelationReport {
    transitions: usize,
    mean_reward: f64,
    transition_pearson: Option<f64>,
    return_pearson: Option<f64>,
    mean_reward_successful: Option<f64>,
    mean_reward_unsuccessful: Option<f64>,
}

fn cmd_relabel(a: RelabelArgs) -> anyhow::Result<()> {
    let cfg = relabel_config(&a)?;
    let seed = cfg.seed()?;
    let d = load_data(&cfg)?;
    let out = prepare_out(&cfg)?;
    let labeler = match &cfg.cvae_dir {
        Some(dir) => {
            let (model, c_default) = CvaeModel::load(dir.join("cvae.ckpt"), dir.join("cvae.json"))?;
            let expert = Dataset::load(dir.join("expert.jsonl"))?;
            let c = a.cvae.temperature.unwrap_or(c_default);
            RewardLabeler::from_expert(model, &expert, c, cfg.reward.sampling_mode)?
        }
        None => {
            let (expert, rest) = expert_and_rest(&cfg, &d)?;
            pipeline::fit_labeler(&expert, &rest, &cfg.cvae, &cfg.reward, seed, 0)?.0
        }
    };
    let relabeled = pipeline::relabel(&labeler, &d, seed, 0)?;
    relabeled.save(out.join("relabeled.jsonl"))?;

    let rewards: Vec<f64> = relabeled.transitions().map(|t| t.reward.unwrap()).collect();
    let mut w = BufWriter::new(File::create(out.join("reward_hist.csv")).map_err(ClueError::from)?);
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (lo, hi, n) in histogram(&rewards, 20) {
        writeln!(w, "{lo},{hi},{n}")?;
    }
    let truth: Option<Vec<f64>> = d
        .is_labeled()
        .then(|| d.transitions().map(|t| t.reward.unwrap()).collect());
    let mean_of = |want: bool| {
        let v: Vec<f64> = relabeled
            .trajectories()
            .iter()
            .zip(d.trajectories())
            .filter(|(_, o)| o.is_success() == Some(want))
            .flat_map(|(t, _)| t.transitions.iter().map(|x| x.reward.unwrap()))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let report = CorrelationReport {
        transitions: rewards.len(),
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        transition_pearson: truth.as_ref().and_then(|t| pearson(&rewards, t)),
        return_pearson: if d.is_labeled() {
            let learned: Vec<f64> = relabeled
                .trajectories()
                .iter()
                .map(|t| t.ret().unwrap())
                .collect();
            let original: Vec<f64> = d.trajectories().iter().map(|t| t.ret().unwrap()).collect();
            pearson(&learned, &original)
        } else {
            None
        },
        mean_reward_successful: mean_of(true),
        mean_reward_unsuccessful: mean_of(false),
    };
    write_json(&out.join("correlation.json"), &report)?;
    println!(
        "relabeled {} transitions; mean reward {:.4}; pearson vs original {:?}",
        report.transitions, report.mean_reward, report.transition_pearson
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_iql(&mut cfg, &a.iql);
    a.data.iter().for_each(|v| cfg.data = Some(v.clone()));
    if let Some(v) = a.fraction {
        cfg.clue.fraction = v;
    }
    let seed = cfg.seed()?;
    let d = load_data(&cfg)?;
    let env = cfg.env()?;
    let out = prepare_out(&cfg)?;
    let seeds = cfg.eval_seeds();
    let episodes = cfg.eval.episodes;
    let evaluator = |agent: &IqlAgent| {
        let (rate, rows) = pipeline::protocol_success(&env, agent, &seeds, episodes);
        let ret = rows.iter().map(|(_, s)| s.mean_return).sum::<f64>() / rows.len().max(1) as f64;
        (ret, rate)
    };
    let (agent, curves) = pipeline::train_agent(&d, &cfg.iql, seed, 0, Some(&evaluator))?;
    curves.write_csv(BufWriter::new(
        File::create(out.join("curves.csv")).map_err(ClueError::from)?,
    ))?;
    agent.save(out.join("agent.ckpt"), out.join("agent.json"))?;
    if let Some(last) = curves.points.last() {
        println!(
            "trained {} steps; success rate {:.3}",
            last.step,
            last.eval_success_rate.unwrap_or(f64::NAN)
        );
    }
    curves.into_result()?;
    Ok(())
}

fn write_scores(
    path: &Path,
    rows: &[(u64, crate::envs::EvalSummary)],
) -> anyhow::Result<(f64, f64)> {
    let mut w = BufWriter::new(File::create(path).map_err(ClueError::from)?);
    writeln!(w, "seed,mean_return,success_rate")?;
    for (seed, s) in rows {
        writeln!(w, "{seed},{},{}", s.mean_return, s.success_rate)?;
    }
    let rates: Vec<f64> = rows.iter().map(|(_, s)| s.success_rate).collect();
    let n = rates.len().max(1) as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    a.agent.iter().for_each(|v| cfg.agent_dir = Some(v.clone()));
    if let Some(v) = a.seeds {
        cfg.eval.seeds = v;
    }
    if let Some(v) = a.episodes {
        cfg.eval.episodes = v;
    }
    if cfg.eval.seeds == 0 || cfg.eval.episodes == 0 {
        return Err(usage("--seeds and --episodes must be at least 1"));
    }
    let dir = cfg
        .agent_dir
        .clone()
        .ok_or_else(|| usage("an agent directory is required (--agent)"))?;
    require_exists(&dir)?;
    let env = cfg.env()?;
    let out = prepare_out(&cfg)?;
    let agent = IqlAgent::load(dir.join("agent.ckpt"), dir.join("agent.json"))?;
    if agent.state_dim() != 2 || agent.action_dim() != 2 {
        return Err(ClueError::Validation("agent dimensions do not match the maze".into()).into());
    }
    let rows = evaluate_protocol(&env, &agent, &cfg.eval_seeds(), cfg.eval.episodes);
    let (mean, std) = write_scores(&out.join("scores.csv"), &rows)?;
    println!(
        "success rate {mean:.3} ± {std:.3} over {} seeds × {} episodes",
        cfg.eval.seeds, cfg.eval.episodes
    );
    Ok(())
}

fn cmd_skills(a: SkillsArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    cfg.pipeline = PipelineKind::Skills;
    apply_cvae(&mut cfg, &a.cvae);
    apply_iql(&mut cfg, &a.iql);
    a.data.iter().for_each(|v| cfg.data = Some(v.clone()));
    if let Some(v) = a.k {
        cfg.skills.k = v;
    }
    if let Some(v) = a.parallel_skills {
        cfg.skills.parallel_skills = v;
    }
    if let Some(m) = &a.mode {
        cfg.skills.mode = match m.as_str() {
            "shared" => SkillCvaeMode::Shared,
            "per-cluster" | "per_cluster" => SkillCvaeMode::PerCluster,
            other => return Err(usage(format!("unknown skills mode {other:?}"))),
        };
    }
    if cfg.skills.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let seed = cfg.seed()?;
    let d = load_data(&cfg)?;
    let env = cfg.env()?;
    let out = prepare_out(&cfg)?;
    let sc = cfg.skills_config();
    let threads = cfg.skills.parallel_skills.max(1);
    let lib = if threads > 1 {
        crate::parallel::with_threads(threads, || learn_skills(&d, &sc, Some(&env), seed))?
    } else {
        learn_skills(&d, &sc, Some(&env), seed)?
    };
    lib.save(&out)?;
    let quads = modal_quadrants(&lib, &env);
    let mut distinct: Vec<usize> = quads.iter().map(|q| q.1).collect();
    distinct.sort_unstable();
    distinct.dedup();
    println!(
        "{} skills learned, {} dropped, {} failed; final states cover {} quadrants",
        lib.skills.len(),
        lib.dropped.len(),
        lib.failures.len(),
        distinct.len()
    );
    if !lib.failures.is_empty() {
        if lib.skills.is_empty() {
            bail!(ClueError::Validation(format!(
                "every skill failed: {:?}",
                lib.failures
            )));
        }
        return Err(PartialFailure {
            failed: lib.failures.len(),
            total: lib.failures.len() + lib.skills.len(),
        }
        .into());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_iql(&mut cfg, &a.iql);
    a.data.iter().for_each(|v| cfg.data = Some(v.clone()));
    a.expert.iter().for_each(|v| cfg.expert = Some(v.clone()));
    if let Some(v) = a.top_k {
        cfg.clue.top_k = v;
    }
    if let Some(v) = a.cvae_iterations {
        cfg.cvae.iterations = v;
    }
    if let Some(p) = &cfg.expert {
        require_exists(p)?;
        cfg.pipeline = PipelineKind::Il;
    }
    let lambdas = parse_grid(&a.lambdas)?;
    let fractions = parse_grid(&a.fractions)?;
    let temps = parse_grid(&a.temperatures)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| usage(format!("bad seed {s:?}")))
        })
        .collect::<anyhow::Result<_>>()?;
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(usage("fractions must lie in (0, 1]"));
    }
    let full = Dataset::load(cfg.data()?)?;
    let env = cfg.env()?;
    let out = prepare_out(&cfg)?;
    let eval_seeds = cfg.eval_seeds();
    let mut w = BufWriter::new(File::create(out.join("sweep.csv")).map_err(ClueError::from)?);
    writeln!(
        w,
        "method,lambda,fraction,temperature,seed,mean_return,success_rate"
    )?;
    for &fraction in &fractions {
        let d = full.take_fraction(fraction)?;
        for &seed in &seeds {
            if d.is_labeled() {
                let (agent, _) = pipeline::train_agent(&d, &cfg.iql, seed, 0, None)?;
                let rows = evaluate_protocol(&env, &agent, &eval_seeds, cfg.eval.episodes);
                let (rate, ret) = summarize(&rows);
                writeln!(w, "sparse,,{fraction},,{seed},{ret},{rate}")?;
            }
            for &lambda in &lambdas {
                let cvae = CvaeConfig {
                    calibration_weight: lambda,
                    ..cfg.cvae.clone()
                };
                let (expert, rest) = expert_and_rest(&cfg, &d)?;
                let (labeler, _) =
                    pipeline::fit_labeler(&expert, &rest, &cvae, &cfg.reward, seed, 0)?;
                for &c in &temps {
                    let relabeled = pipeline::relabel(&labeler.with_temperature(c)?, &d, seed, 0)?;
                    let (agent, _) = pipeline::train_agent(&relabeled, &cfg.iql, seed, 0, None)?;
                    let rows = evaluate_protocol(&env, &agent, &eval_seeds, cfg.eval.episodes);
                    let (rate, ret) = summarize(&rows);
                    writeln!(w, "clue,{lambda},{fraction},{c},{seed},{ret},{rate}")?;
                    println!("λ={lambda} fraction={fraction} c={c} seed={seed}: success {rate:.3}");
                }
            }
        }
    }
    Ok(())
}

fn summarize(rows: &[(u64, crate::envs::EvalSummary)]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|(_, s)| s.success_rate).sum::<f64>() / n,
        rows.iter().map(|(_, s)| s.mean_return).sum::<f64>() / n,
    )
}
