//! Conditional VAE over behavior samples: the state conditions, the action is
//! predicted. Trained on the empirical ELBO plus the calibration penalty that
//! pulls expert embeddings onto a single latent point.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormStats};
use crate::error::{check_dim, ClueError, Result};
use crate::numerics::{
    adam_step, read_mlps, write_mlps, Activation, AdamConfig, AdamState, Mlp, OutputActivation,
};
use crate::parallel::{map_chunks, map_range, sum_ordered};
use crate::rng::{normal, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("latent std", mean.len(), std.len())?;
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(ClueError::InvalidArgument(
                "latent std must be positive and finite".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize(g: &GaussianLatent, rng: &mut Rng) -> Vec<f64> {
    let eps: Vec<f64> = (0..g.dim()).map(|_| normal(rng)).collect();
    reparameterize_with(g, &eps)
}

pub fn reparameterize_with(g: &GaussianLatent, eps: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.std)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn kl_to_standard_normal(g: &GaussianLatent) -> f64 {
    0.5 * g
        .mean
        .iter()
        .zip(&g.std)
        .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
        .sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight of the calibration penalty (λ).
    pub calibration_weight: f64,
    /// Monte-Carlo samples per datum in the reconstruction term (L).
    pub elbo_samples: usize,
    /// Train the ELBO on the unlabeled pool only, leaving expert data out.
    pub exclude_expert_from_elbo: bool,
    /// Fixed standard deviation of the Gaussian action likelihood.
    pub decoder_std: f64,
}

impl Default for CvaeConfig {
    /// Locomotion-style defaults.
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 128,
            hidden_layers: 2,
            batch_size: 128,
            iterations: 10_000,
            learning_rate: 1e-4,
            calibration_weight: 0.1,
            elbo_samples: 1,
            exclude_expert_from_elbo: false,
            decoder_std: 1.0,
        }
    }
}

impl CvaeConfig {
    /// Maze-style settings: wider networks, larger batches, stronger calibration.
    pub fn maze() -> Self {
        Self {
            hidden: 512,
            batch_size: 256,
            iterations: 100_000,
            learning_rate: 1e-3,
            calibration_weight: 0.8,
            ..Self::default()
        }
    }

    /// Small settings that train in seconds on the built-in mazes.
    pub fn desk() -> Self {
        Self {
            latent_dim: 4,
            hidden: 64,
            hidden_layers: 2,
            batch_size: 128,
            iterations: 2_000,
            learning_rate: 1e-3,
            calibration_weight: 0.8,
            elbo_samples: 1,
            exclude_expert_from_elbo: false,
            // Bounded maze actions vary less than a unit-variance likelihood
            // can resolve, which collapses every posterior onto the prior.
            decoder_std: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClueError::InvalidArgument(m.to_string()));
        if self.latent_dim == 0
            || self.hidden == 0
            || self.batch_size == 0
            || self.elbo_samples == 0
        {
            return bad("cvae sizes must be positive");
        }
        if !(self.decoder_std > 0.0) {
            return bad("decoder_std must be positive");
        }
        if !(self.calibration_weight >= 0.0) {
            return bad("calibration weight must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Encoder `(s, a) → (μ, log σ)` and decoder `(z, s) → â`.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    encoder: Mlp,
    decoder: Mlp,
    latent_dim: usize,
    state_dim: usize,
    action_dim: usize,
    pub calibration_weight: f64,
    pub elbo_samples: usize,
    /// Fixed standard deviation of `p(a | z, s)`.
    pub decoder_std: f64,
    norm: NormStats,
}

/// Value and parts of the per-sample negative ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboParts {
    pub kl: f64,
    pub reconstruction: f64,
}

impl CvaeModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &CvaeConfig,
        norm: NormStats,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        check_dim("normalization stats", state_dim, norm.mean.len())?;
        let hidden = vec![config.hidden; config.hidden_layers];
        let enc_sizes = [
            &[state_dim + action_dim][..],
            &hidden,
            &[2 * config.latent_dim],
        ]
        .concat();
        let dec_sizes = [&[config.latent_dim + state_dim][..], &hidden, &[action_dim]].concat();
        Ok(Self {
            encoder: Mlp::new(
                &enc_sizes,
                Activation::Relu,
                OutputActivation::Identity,
                rng,
            )?,
            decoder: Mlp::new(
                &dec_sizes,
                Activation::Relu,
                OutputActivation::Identity,
                rng,
            )?,
            latent_dim: config.latent_dim,
            state_dim,
            action_dim,
            calibration_weight: config.calibration_weight,
            elbo_samples: config.elbo_samples,
            decoder_std: config.decoder_std,
            norm,
        })
    }

    /// Assembles a model from explicit networks.
    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        state_dim: usize,
        norm: NormStats,
        calibration_weight: f64,
    ) -> Result<Self> {
        let latent_dim = encoder.output_dim() / 2;
        if encoder.output_dim() != 2 * latent_dim || latent_dim == 0 {
            return Err(ClueError::InvalidArgument(
                "encoder output must be 2 × latent_dim".into(),
            ));
        }
        let action_dim = decoder.output_dim();
        check_dim("encoder input", state_dim + action_dim, encoder.input_dim())?;
        check_dim("decoder input", latent_dim + state_dim, decoder.input_dim())?;
        check_dim("normalization stats", state_dim, norm.mean.len())?;
        if !(calibration_weight >= 0.0) {
            return Err(ClueError::InvalidArgument(
                "calibration weight must be non-negative".into(),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            state_dim,
            action_dim,
            calibration_weight,
            elbo_samples: 1,
            decoder_std: 1.0,
            norm,
        })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn encoder_input(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_dim("cvae state", self.state_dim, s.len())?;
        check_dim("cvae action", self.action_dim, a.len())?;
        let mut x = self.norm.normalize(s);
        x.extend_from_slice(a);
        Ok(x)
    }

    fn split_encoding(&self, out: &[f64]) -> GaussianLatent {
        let (mean, raw) = out.split_at(self.latent_dim);
        GaussianLatent {
            mean: mean.to_vec(),
            std: raw
                .iter()
                .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX).exp())
                .collect(),
        }
    }

    /// Posterior `q(z | s, a)`; `s` is in environment units.
    pub fn encode(&self, s: &[f64], a: &[f64]) -> Result<GaussianLatent> {
        let out = self.encoder.forward(&self.encoder_input(s, a)?)?;
        Ok(self.split_encoding(&out))
    }

    /// Decoder mean action for latent `z` and state `s`.
    pub fn decode(&self, z: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        check_dim("latent", self.latent_dim, z.len())?;
        check_dim("cvae state", self.state_dim, s.len())?;
        let mut x = z.to_vec();
        x.extend(self.norm.normalize(s));
        self.decoder.forward(&x)
    }

    /// Negative ELBO of one behavior sample with explicit noise, one `eps`
    /// vector per Monte-Carlo sample.
    pub fn elbo_with_noise(
        &self,
        s: &[f64],
        a: &[f64],
        eps: &[Vec<f64>],
    ) -> Result<(f64, ElboParts)> {
        let g = self.encode(s, a)?;
        let kl = kl_to_standard_normal(&g);
        let mut rec = 0.0;
        for e in eps {
            let z = reparameterize_with(&g, e);
            let a_hat = self.decode(&z, s)?;
            rec += 0.5
                * a.iter()
                    .zip(&a_hat)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
        }
        rec /= self.decoder_std * self.decoder_std;
        rec /= eps.len() as f64;
        let loss = kl + rec;
        if !loss.is_finite() {
            return Err(ClueError::TrainingDiverged("non-finite ELBO".into()));
        }
        Ok((
            loss,
            ElboParts {
                kl,
                reconstruction: rec,
            },
        ))
    }

    /// Accumulates `weight · ∇(negative ELBO)` for one sample.
    #[allow(clippy::too_many_arguments)]
    fn elbo_grad_into(
        &self,
        enc_in: &[f64],
        s_norm: &[f64],
        a: &[f64],
        eps: &[Vec<f64>],
        weight: f64,
        enc_grad: &mut [f64],
        dec_grad: &mut [f64],
    ) -> ElboParts {
        let k = self.latent_dim;
        let tr = self
            .encoder
            .forward_trace(enc_in, None)
            .expect("checked dims");
        let g = self.split_encoding(&tr.output);
        let kl = kl_to_standard_normal(&g);
        let mut d_mean: Vec<f64> = g.mean.iter().map(|m| weight * m).collect();
        let mut d_std: Vec<f64> = g.std.iter().map(|s| weight * (s - 1.0 / s)).collect();
        let mut rec = 0.0;
        let inv_l = 1.0 / eps.len() as f64;
        let prec = 1.0 / (self.decoder_std * self.decoder_std);
        for e in eps {
            let mut x = reparameterize_with(&g, e);
            x.extend_from_slice(s_norm);
            let dtr = self.decoder.forward_trace(&x, None).expect("checked dims");
            let diff: Vec<f64> = dtr.output.iter().zip(a).map(|(y, t)| y - t).collect();
            rec += 0.5 * prec * diff.iter().map(|d| d * d).sum::<f64>() * inv_l;
            let out_grad: Vec<f64> = diff.iter().map(|d| d * prec * weight * inv_l).collect();
            let dx = self.decoder.backward_trace(&dtr, &out_grad, dec_grad);
            for j in 0..k {
                d_mean[j] += dx[j];
                d_std[j] += dx[j] * e[j];
            }
        }
        let mut out_grad = d_mean;
        out_grad.extend(self.log_std_grad(&tr.output[k..], &g.std, &d_std));
        self.encoder.backward_trace(&tr, &out_grad, enc_grad);
        ElboParts {
            kl,
            reconstruction: rec,
        }
    }

    /// Accumulates `weight · ∇(‖μ‖² + ‖σ‖²)` for one sample; returns the value.
    fn calibration_grad_into(&self, enc_in: &[f64], weight: f64, enc_grad: &mut [f64]) -> f64 {
        let k = self.latent_dim;
        let tr = self
            .encoder
            .forward_trace(enc_in, None)
            .expect("checked dims");
        let g = self.split_encoding(&tr.output);
        let value = g.mean.iter().chain(&g.std).map(|v| v * v).sum::<f64>();
        if weight != 0.0 {
            let mut out_grad: Vec<f64> = g.mean.iter().map(|m| 2.0 * weight * m).collect();
            let d_std: Vec<f64> = g.std.iter().map(|s| 2.0 * weight * s).collect();
            out_grad.extend(self.log_std_grad(&tr.output[k..], &g.std, &d_std));
            self.encoder.backward_trace(&tr, &out_grad, enc_grad);
        }
        value
    }

    /// Chain rule through `σ = exp(clamp(raw))`.
    fn log_std_grad(&self, raw: &[f64], std: &[f64], d_std: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(std)
            .zip(d_std)
            .map(|((r, s), d)| {
                if *r > LOG_STD_MIN && *r < LOG_STD_MAX {
                    d * s
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Objective of one iteration: mean negative ELBO over `mixed` plus
    /// `λ ·` mean calibration over `expert`, with the analytic gradients for
    /// encoder and decoder. `eps[b]` holds the noise of mixed sample `b`.
    pub fn objective_and_grad(
        &self,
        mixed: &[(Vec<f64>, Vec<f64>)],
        eps: &[Vec<Vec<f64>>],
        expert: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<ObjectiveEval> {
        check_dim("noise batch", mixed.len(), eps.len())?;
        if mixed.is_empty() {
            return Err(ClueError::InvalidArgument("empty training batch".into()));
        }
        let (ne, nd) = (self.encoder.num_params(), self.decoder.num_params());
        let w_mixed = 1.0 / mixed.len() as f64;
        let inputs: Vec<(Vec<f64>, Vec<f64>)> = mixed
            .iter()
            .map(|(s, a)| Ok((self.encoder_input(s, a)?, self.norm.normalize(s))))
            .collect::<Result<_>>()?;
        let chunks = map_chunks(mixed.len(), |range| {
            let mut ge = vec![0.0; ne];
            let mut gd = vec![0.0; nd];
            let mut parts = ElboParts::default();
            for b in range {
                let p = self.elbo_grad_into(
                    &inputs[b].0,
                    &inputs[b].1,
                    &mixed[b].1,
                    &eps[b],
                    w_mixed,
                    &mut ge,
                    &mut gd,
                );
                parts.kl += p.kl;
                parts.reconstruction += p.reconstruction;
            }
            (ge, gd, parts)
        });
        let mut parts = ElboParts::default();
        let mut enc_parts = Vec::with_capacity(chunks.len());
        let mut dec_parts = Vec::with_capacity(chunks.len());
        for (ge, gd, p) in chunks {
            parts.kl += p.kl;
            parts.reconstruction += p.reconstruction;
            enc_parts.push(ge);
            dec_parts.push(gd);
        }
        parts.kl *= w_mixed;
        parts.reconstruction *= w_mixed;

        let mut calibration = 0.0;
        if !expert.is_empty() {
            let w_exp = self.calibration_weight / expert.len() as f64;
            let exp_inputs: Vec<Vec<f64>> = expert
                .iter()
                .map(|(s, a)| self.encoder_input(s, a))
                .collect::<Result<_>>()?;
            let chunks = map_chunks(expert.len(), |range| {
                let mut ge = vec![0.0; ne];
                let mut v = 0.0;
                for i in range {
                    v += self.calibration_grad_into(&exp_inputs[i], w_exp, &mut ge);
                }
                (ge, v)
            });
            for (ge, v) in chunks {
                calibration += v;
                enc_parts.push(ge);
            }
            calibration /= expert.len() as f64;
        }
        let elbo_loss = parts.kl + parts.reconstruction;
        let total = elbo_loss + self.calibration_weight * calibration;
        if !total.is_finite() {
            return Err(ClueError::TrainingDiverged(format!(
                "non-finite objective (kl {}, reconstruction {}, calibration {calibration})",
                parts.kl, parts.reconstruction
            )));
        }
        Ok(ObjectiveEval {
            total,
            parts,
            calibration,
            encoder_grad: sum_ordered(enc_parts, ne),
            decoder_grad: sum_ordered(dec_parts, nd),
        })
    }

    pub fn save(
        &self,
        ckpt: impl AsRef<Path>,
        sidecar: impl AsRef<Path>,
        c_default: f64,
    ) -> Result<()> {
        write_mlps(
            BufWriter::new(File::create(ckpt)?),
            &[&self.encoder, &self.decoder],
        )?;
        let meta = CvaeSidecar {
            latent_dim: self.latent_dim,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            lambda: self.calibration_weight,
            c_default,
            elbo_samples: self.elbo_samples,
            decoder_std: self.decoder_std,
            state_mean: self.norm.mean.clone(),
            state_std: self.norm.std.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar)?), &meta)?;
        Ok(())
    }

    /// Loads a checkpoint and returns the model with the sidecar's default temperature.
    pub fn load(ckpt: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<(Self, f64)> {
        let meta: CvaeSidecar = serde_json::from_reader(BufReader::new(File::open(sidecar)?))?;
        let acts = [(Activation::Relu, OutputActivation::Identity); 2];
        let mut nets = read_mlps(BufReader::new(File::open(ckpt)?), &acts)?.into_iter();
        let (encoder, decoder) = (nets.next().unwrap(), nets.next().unwrap());
        let norm = NormStats {
            mean: meta.state_mean,
            std: meta.state_std,
        };
        let mut m = Self::from_parts(encoder, decoder, meta.state_dim, norm, meta.lambda)?;
        check_dim("sidecar latent_dim", meta.latent_dim, m.latent_dim)?;
        check_dim("sidecar action_dim", meta.action_dim, m.action_dim)?;
        m.elbo_samples = meta.elbo_samples;
        m.decoder_std = meta.decoder_std;
        Ok((m, meta.c_default))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CvaeSidecar {
    latent_dim: usize,
    state_dim: usize,
    action_dim: usize,
    lambda: f64,
    c_default: f64,
    #[serde(default = "one")]
    elbo_samples: usize,
    #[serde(default = "unit")]
    decoder_std: f64,
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
}

fn unit() -> f64 {
    1.0
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub total: f64,
    pub parts: ElboParts,
    pub calibration: f64,
    pub encoder_grad: Vec<f64>,
    pub decoder_grad: Vec<f64>,
}

/// Negative ELBO of one sample, `L` fresh noise draws from `rng`.
pub fn elbo_loss(m: &CvaeModel, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(f64, ElboParts)> {
    let eps: Vec<Vec<f64>> = (0..m.elbo_samples)
        .map(|_| (0..m.latent_dim).map(|_| normal(rng)).collect())
        .collect();
    m.elbo_with_noise(s, a, &eps)
}

/// Mean of `‖μ‖² + ‖σ‖²` over an expert batch.
pub fn calibration_loss(m: &CvaeModel, expert_batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if expert_batch.is_empty() {
        return Err(ClueError::InvalidArgument(
            "calibration needs a non-empty expert batch".into(),
        ));
    }
    let mut total = 0.0;
    for (s, a) in expert_batch {
        let g = m.encode(s, a)?;
        total += g.mean.iter().chain(&g.std).map(|v| v * v).sum::<f64>();
    }
    Ok(total / expert_batch.len() as f64)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CvaeTrainReport {
    /// Negative ELBO of each iteration's mixed batch.
    pub elbo_loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub calibration: Vec<f64>,
    /// Mean pairwise distance of expert posterior means after training.
    pub expert_spread: f64,
    pub diverged: Option<String>,
}

impl CvaeTrainReport {
    pub fn iterations(&self) -> usize {
        self.elbo_loss.len()
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.diverged {
            Some(msg) => Err(ClueError::TrainingDiverged(msg.clone())),
            None => Ok(self),
        }
    }
}

fn behavior_pairs(d: &Dataset) -> Vec<(Vec<f64>, Vec<f64>)> {
    d.transitions()
        .map(|t| (t.state.clone(), t.action.clone()))
        .collect()
}

/// Minimizes `−ELBO(mixed batch) + λ · calibration(expert batch)`.
///
/// Each iteration draws one mixed and one expert batch independently, with
/// replacement. A non-finite objective stops training and the report keeps
/// everything recorded up to that point.
pub fn train(
    m: &mut CvaeModel,
    mixed: &Dataset,
    expert: &Dataset,
    config: &CvaeConfig,
    rng: &mut Rng,
) -> Result<CvaeTrainReport> {
    config.validate()?;
    check_dim("mixed state_dim", m.state_dim, mixed.state_dim())?;
    check_dim("mixed action_dim", m.action_dim, mixed.action_dim())?;
    if expert.num_transitions() == 0 {
        return Err(ClueError::InvalidArgument("expert dataset is empty".into()));
    }
    check_dim("expert state_dim", m.state_dim, expert.state_dim())?;
    m.calibration_weight = config.calibration_weight;
    m.elbo_samples = config.elbo_samples;
    m.decoder_std = config.decoder_std;
    let pool = behavior_pairs(mixed);
    let experts = behavior_pairs(expert);
    let mut enc_opt = AdamState::new(
        m.encoder.num_params(),
        AdamConfig::with_lr(config.learning_rate),
    );
    let mut dec_opt = AdamState::new(
        m.decoder.num_params(),
        AdamConfig::with_lr(config.learning_rate),
    );
    let mut report = CvaeTrainReport::default();
    let k = m.latent_dim;
    for it in 0..config.iterations {
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..config.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let eps: Vec<Vec<Vec<f64>>> = (0..config.batch_size)
            .map(|_| {
                (0..config.elbo_samples)
                    .map(|_| (0..k).map(|_| normal(rng)).collect())
                    .collect()
            })
            .collect();
        let ebatch: Vec<(Vec<f64>, Vec<f64>)> = (0..config.batch_size)
            .map(|_| experts[rng.random_range(0..experts.len())].clone())
            .collect();
        let eval = match m.objective_and_grad(&batch, &eps, &ebatch) {
            Ok(e) => e,
            Err(e) => {
                report.diverged = Some(format!("iteration {it}: {e}"));
                break;
            }
        };
        report
            .elbo_loss
            .push(eval.parts.kl + eval.parts.reconstruction);
        report.kl.push(eval.parts.kl);
        report.reconstruction.push(eval.parts.reconstruction);
        report.calibration.push(eval.calibration);
        let step = adam_step(m.encoder.params_mut(), &eval.encoder_grad, &mut enc_opt)
            .and_then(|_| adam_step(m.decoder.params_mut(), &eval.decoder_grad, &mut dec_opt));
        if let Err(e) = step {
            report.diverged = Some(format!("iteration {it}: {e}"));
            break;
        }
    }
    report.expert_spread = expert_spread(m, expert)?;
    Ok(report)
}

/// Posterior means of every transition, in dataset order.
pub fn embed_means(m: &CvaeModel, d: &Dataset) -> Result<Vec<Vec<f64>>> {
    let pairs = behavior_pairs(d);
    map_range(pairs.len(), |i| {
        m.encode(&pairs[i].0, &pairs[i].1).map(|g| g.mean)
    })
    .into_iter()
    .collect()
}

/// Mean pairwise Euclidean distance between expert posterior means. Large
/// expert sets are thinned to at most 512 evenly spaced transitions.
pub fn expert_spread(m: &CvaeModel, expert: &Dataset) -> Result<f64> {
    let means = embed_means(m, expert)?;
    let stride = means.len().div_ceil(512).max(1);
    let pts: Vec<&Vec<f64>> = means.iter().step_by(stride).collect();
    if pts.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            total += crate::numerics::distance(pts[i], pts[j]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-dimension standard deviation of the expert posterior means.
pub fn expert_mean_std(m: &CvaeModel, expert: &Dataset) -> Result<Vec<f64>> {
    let means = embed_means(m, expert)?;
    let mat = crate::numerics::Matrix::from_rows(&means)?;
    Ok(mat.column_mean_std().1)
}
